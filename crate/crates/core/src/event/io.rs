//! Event file formats.
//!
//! CSV: one record per line, `t_ns,x,y,p`, optional header line. Polarity
//! accepts `1`/`+1`/`-1`, plus `0` which maps to `-1` (some recorders encode
//! OFF events as 0).
//!
//! Binary: 8-byte header (magic `EVT1`, width u16 LE, height u16 LE) followed
//! by 13-byte records: t u64 LE, x u16 LE, y u16 LE, p i8 (-1/+1).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BBoxN, Event, EventError, EventStream, Geometry};

pub const BINARY_MAGIC: &[u8; 4] = b"EVT1";
pub const BINARY_RECORD_LEN: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

/// Parse an event file, dispatching on `format`. CSV requires the geometry
/// up front; binary carries it in the header.
pub fn parse_event_file(
    path: &Path,
    format: EventFormat,
    csv_geometry: Option<Geometry>,
) -> Result<EventStream, EventError> {
    match format {
        EventFormat::Csv => {
            let geometry = csv_geometry
                .ok_or_else(|| EventError::BadHeader("CSV input needs an explicit geometry".into()))?;
            let file = File::open(path)?;
            parse_csv_events(BufReader::new(file), geometry)
        }
        EventFormat::Binary => {
            let file = File::open(path)?;
            read_binary_events(BufReader::new(file))
        }
    }
}

fn parse_polarity(token: &str, line: usize) -> Result<i8, EventError> {
    match token.trim() {
        "1" | "+1" => Ok(1),
        "-1" | "0" => Ok(-1),
        other => Err(EventError::BadPolarity {
            line,
            token: other.to_string(),
        }),
    }
}

/// Parse CSV event records from a reader. Out-of-order rows are tolerated;
/// the resulting stream is stably sorted by timestamp.
pub fn parse_csv_events<R: BufRead>(
    reader: R,
    geometry: Geometry,
) -> Result<EventStream, EventError> {
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        // Optional header: skip a first line that does not start with a digit.
        if idx == 0 && !trimmed.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let mut fields = trimmed.split(',');
        let mut next = |name: &str| {
            fields.next().ok_or_else(|| EventError::MalformedLine {
                line: line_no,
                reason: format!("missing field {name}"),
            })
        };
        let t: u64 = next("t")?
            .trim()
            .parse()
            .map_err(|e| EventError::MalformedLine {
                line: line_no,
                reason: format!("bad timestamp: {e}"),
            })?;
        let x: u32 = next("x")?
            .trim()
            .parse()
            .map_err(|e| EventError::MalformedLine {
                line: line_no,
                reason: format!("bad x: {e}"),
            })?;
        let y: u32 = next("y")?
            .trim()
            .parse()
            .map_err(|e| EventError::MalformedLine {
                line: line_no,
                reason: format!("bad y: {e}"),
            })?;
        let p = parse_polarity(next("p")?, line_no)?;
        if fields.next().is_some() {
            return Err(EventError::MalformedLine {
                line: line_no,
                reason: "too many fields".into(),
            });
        }
        if x >= geometry.width as u32 || y >= geometry.height as u32 {
            return Err(EventError::OutOfRange {
                line: line_no,
                x,
                y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        events.push(Event {
            t,
            x: x as u16,
            y: y as u16,
            p,
        });
    }
    Ok(EventStream::new(geometry, events))
}

pub fn write_csv_events<W: Write>(mut w: W, stream: &EventStream) -> Result<(), EventError> {
    writeln!(w, "t_ns,x,y,p")?;
    for e in stream.events() {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p)?;
    }
    Ok(())
}

/// Read a binary event file (header + fixed-size records).
pub fn read_binary_events<R: Read>(mut reader: R) -> Result<EventStream, EventError> {
    let mut header = [0u8; 8];
    reader.read_exact(&mut header).map_err(|_| {
        EventError::BadHeader("file shorter than the 8-byte header".into())
    })?;
    if &header[0..4] != BINARY_MAGIC {
        return Err(EventError::BadHeader(format!(
            "bad magic {:?}, expected {:?}",
            &header[0..4],
            BINARY_MAGIC
        )));
    }
    let geometry = Geometry {
        width: u16::from_le_bytes([header[4], header[5]]),
        height: u16::from_le_bytes([header[6], header[7]]),
    };
    let mut events = Vec::new();
    let mut offset = 8u64;
    let mut rec = [0u8; BINARY_RECORD_LEN];
    loop {
        match read_record(&mut reader, &mut rec)? {
            0 => break,
            n if n == BINARY_RECORD_LEN => {}
            n => {
                return Err(EventError::MalformedRecord {
                    offset,
                    reason: format!("truncated record of {n} bytes"),
                })
            }
        }
        let event = decode_record(&rec, offset, geometry)?;
        events.push(event);
        offset += BINARY_RECORD_LEN as u64;
    }
    Ok(EventStream::new(geometry, events))
}

/// Read up to one full record, returning the byte count (0 on clean EOF).
fn read_record<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<usize, EventError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = reader.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

fn decode_record(rec: &[u8; 13], offset: u64, geometry: Geometry) -> Result<Event, EventError> {
    let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
    let x = u16::from_le_bytes([rec[8], rec[9]]);
    let y = u16::from_le_bytes([rec[10], rec[11]]);
    let p = rec[12] as i8;
    if !geometry.contains(x, y) {
        return Err(EventError::MalformedRecord {
            offset,
            reason: format!(
                "coordinate ({x}, {y}) outside {}x{} geometry",
                geometry.width, geometry.height
            ),
        });
    }
    if p != 1 && p != -1 {
        return Err(EventError::MalformedRecord {
            offset,
            reason: format!("polarity byte {p} is not -1/+1"),
        });
    }
    Ok(Event { t, x, y, p })
}

pub fn write_binary_events<W: Write>(w: W, stream: &EventStream) -> Result<(), EventError> {
    let mut w = BufWriter::new(w);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&stream.geometry().width.to_le_bytes())?;
    w.write_all(&stream.geometry().height.to_le_bytes())?;
    for e in stream.events() {
        w.write_all(&e.t.to_le_bytes())?;
        w.write_all(&e.x.to_le_bytes())?;
        w.write_all(&e.y.to_le_bytes())?;
        w.write_all(&[e.p as u8])?;
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth file: `frame_index,cx,cy,w,h` per line, normalized [0,1]
/// coordinates, optional header. Returns boxes indexed by frame.
pub fn parse_gt_boxes<R: BufRead>(reader: R) -> Result<Vec<BBoxN>, EventError> {
    let mut rows: Vec<(usize, BBoxN)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && !trimmed.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 5 {
            return Err(EventError::MalformedLine {
                line: line_no,
                reason: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let frame: usize = fields[0]
            .trim()
            .parse()
            .map_err(|e| EventError::MalformedLine {
                line: line_no,
                reason: format!("bad frame index: {e}"),
            })?;
        let mut vals = [0f64; 4];
        for (i, f) in fields[1..].iter().enumerate() {
            vals[i] = f.trim().parse().map_err(|e| EventError::MalformedLine {
                line: line_no,
                reason: format!("bad value: {e}"),
            })?;
        }
        rows.push((frame, BBoxN::new(vals[0], vals[1], vals[2], vals[3])));
    }
    rows.sort_by_key(|(f, _)| *f);
    for (i, (f, _)) in rows.iter().enumerate() {
        if *f != i {
            return Err(EventError::MalformedLine {
                line: 0,
                reason: format!("frame indices must be 0..n contiguous, found {f} at row {i}"),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, b)| b).collect())
}

pub fn write_gt_boxes<W: Write>(mut w: W, boxes: &[BBoxN]) -> Result<(), EventError> {
    writeln!(w, "frame_index,cx,cy,w,h")?;
    for (i, b) in boxes.iter().enumerate() {
        writeln!(w, "{},{},{},{},{}", i, b.cx, b.cy, b.w, b.h)?;
    }
    Ok(())
}
