//! Episode container and PGM dumps.
//!
//! Container layout, all little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `LACEPI01` | 8 bytes |
//! | height, width, length `T` | u32 ×3 |
//! | seed | u64 |
//! | cell | u32 |
//! | max speed | i32 |
//! | scene class (0 static, 1 slow, 2 fast) | u8 |
//! | has distractor | u8 |
//! | task size, distractor size | u32 ×2 |
//! | task positions `(x, y)` for steps `0..=T` | i32 pairs |
//! | distractor positions, if present | i32 pairs |
//! | frames, each `3×H×W` row-major | f32 |
//! | motion masks, each `H×W` | u8 (0/1) |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::render::{Episode, Frame, Sprite};
use super::SceneClass;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LACEPI01";

impl Episode {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.height, self.width, self.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.cell as u32).to_le_bytes())?;
        w.write_all(&self.max_speed.to_le_bytes())?;
        w.write_all(&[self.class.code(), self.distractor.is_some() as u8])?;
        let dsize = self.distractor.as_ref().map_or(0, |d| d.size);
        w.write_all(&(self.task.size as u32).to_le_bytes())?;
        w.write_all(&(dsize as u32).to_le_bytes())?;
        for sprite in std::iter::once(&self.task).chain(self.distractor.iter()) {
            for &(x, y) in &sprite.positions {
                w.write_all(&x.to_le_bytes())?;
                w.write_all(&y.to_le_bytes())?;
            }
        }
        for f in &self.frames {
            for v in &f.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for m in &self.motion_masks {
            let bytes: Vec<u8> = m.iter().map(|&b| b as u8).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an episode container (bad magic)".into()));
        }
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let length = read_u32(&mut r)? as usize;
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let cell = read_u32(&mut r)? as usize;
        let max_speed = i32::from_le_bytes(read_array(&mut r)?);
        let [class, has_distractor] = read_array::<2>(&mut r)?;
        let class = SceneClass::from_code(class)?;
        let task_size = read_u32(&mut r)? as usize;
        let distractor_size = read_u32(&mut r)? as usize;
        if height == 0 || width == 0 || cell == 0 || !height.is_multiple_of(cell) || !width.is_multiple_of(cell) {
            return Err(Error::Format(format!("invalid geometry {height}×{width} / cell {cell}")));
        }
        let mut sprite = |size: usize| -> Result<Sprite> {
            let positions = (0..=length)
                .map(|_| {
                    let x = i32::from_le_bytes(read_array(&mut r)?);
                    let y = i32::from_le_bytes(read_array(&mut r)?);
                    Ok((x, y))
                })
                .collect::<Result<_>>()?;
            Ok(Sprite { size, positions })
        };
        let task = sprite(task_size)?;
        let distractor = match has_distractor {
            0 => None,
            1 => Some(sprite(distractor_size)?),
            b => return Err(Error::Format(format!("bad distractor flag {b}"))),
        };
        let hw = height * width;
        let mut frames = Vec::with_capacity(length);
        let mut buf = vec![0u8; 3 * hw * 4];
        for timestep in 0..length {
            read_exact(&mut r, &mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            frames.push(Frame { height, width, timestep, data });
        }
        let mut motion_masks = Vec::with_capacity(length);
        let mut mbuf = vec![0u8; hw];
        for _ in 0..length {
            read_exact(&mut r, &mut mbuf)?;
            motion_masks.push(mbuf.iter().map(|&b| b != 0).collect());
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after episode".into()));
        }
        Ok(Episode {
            height,
            width,
            cell,
            max_speed,
            seed,
            class,
            frames,
            task,
            distractor,
            motion_masks,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated episode container".into()),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    ep.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Episode::read_from(BufReader::new(File::open(path)?))
}

/// Plain (P2) greyscale dump of a frame's luminance, maxval 255.
pub fn write_pgm(frame: &Frame, mut w: impl Write) -> Result<()> {
    writeln!(w, "P2")?;
    writeln!(w, "# timestep {}", frame.timestep)?;
    writeln!(w, "{} {}", frame.width, frame.height)?;
    writeln!(w, "255")?;
    let lum = frame.luminance();
    for row in lum.chunks(frame.width) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_episode, SceneConfig};

    #[test]
    fn container_round_trip() {
        for distractor in [true, false] {
            let cfg = SceneConfig { distractor, ..SceneConfig::default() };
            let ep = generate_episode(&cfg, 5).unwrap();
            let mut bytes = Vec::new();
            ep.write_to(&mut bytes).unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            assert_eq!(Episode::read_from(&bytes[..]).unwrap(), ep);
        }
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let ep = generate_episode(&SceneConfig::default(), 5).unwrap();
        let mut bytes = Vec::new();
        ep.write_to(&mut bytes).unwrap();
        assert!(matches!(Episode::read_from(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(Episode::read_from(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_has_header_and_one_row_per_line() {
        let ep = generate_episode(&SceneConfig::default(), 1).unwrap();
        let mut out = Vec::new();
        write_pgm(&ep.frames[0], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[2], "32 32");
        assert_eq!(lines.len(), 4 + 32);
        assert!(lines[4].split(' ').count() == 32);
    }
}
