//! JSON-lines episode log: one header line, then one line per frame.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::{AgentAttributes, AgentId, Episode, MapContext, SceneFrame};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "")]
struct Header<T: Scalar> {
    format_version: u32,
    frame_rate_hz: T,
    map: MapContext<T>,
    attributes: BTreeMap<AgentId, AgentAttributes<T>>,
}

/// Streams frames after a header line.
pub struct EpisodeWriter<W: Write> {
    out: W,
}

impl<W: Write> EpisodeWriter<W> {
    pub fn new<T: Scalar>(
        mut out: W,
        frame_rate_hz: T,
        map: &MapContext<T>,
        attributes: &BTreeMap<AgentId, AgentAttributes<T>>,
    ) -> Result<Self> {
        let header = Header {
            format_version: FORMAT_VERSION,
            frame_rate_hz,
            map: map.clone(),
            attributes: attributes.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn push<T: Scalar>(&mut self, frame: &SceneFrame<T>) -> Result<()> {
        serde_json::to_writer(&mut self.out, frame)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_episode<T: Scalar, W: Write>(out: W, episode: &Episode<T>) -> Result<W> {
    let mut w = EpisodeWriter::new(out, episode.frame_rate_hz, &episode.map, &episode.attributes)?;
    for f in &episode.frames {
        w.push(f)?;
    }
    w.finish()
}

/// Reads and validates an episode.
pub fn read_episode<T: Scalar, R: BufRead>(input: R) -> Result<Episode<T>> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty episode file".into()))??;
    let header: Header<T> = serde_json::from_str(&header_line)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let mut frames = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(serde_json::from_str::<SceneFrame<T>>(&line)?);
    }
    let episode = Episode {
        map: Arc::new(header.map),
        attributes: header.attributes,
        frames,
        frame_rate_hz: header.frame_rate_hz,
    };
    episode.validate()?;
    Ok(episode)
}

pub fn save_episode<T: Scalar>(path: &Path, episode: &Episode<T>) -> Result<()> {
    write_episode(BufWriter::new(File::create(path)?), episode)?;
    Ok(())
}

pub fn load_episode<T: Scalar>(path: &Path) -> Result<Episode<T>> {
    read_episode(BufReader::new(File::open(path)?))
}
