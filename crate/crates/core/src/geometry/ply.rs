//! PLY reader and writer for colored point clouds.
//!
//! Files are written with a single `vertex` element carrying `float x, y, z`
//! and `uchar red, green, blue`. The reader accepts any scalar type for those
//! properties, ignores unknown properties and elements (list properties
//! included), and understands ASCII and both binary byte orders.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Point, PointCloud, ReferenceFrame};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("header line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("vertex {index}: {message}")]
    Body { index: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, bytes: &[u8], big_endian: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut buf = [0u8; $n];
                buf.copy_from_slice(&bytes[..$n]);
                if big_endian {
                    <$t>::from_be_bytes(buf) as f64
                } else {
                    <$t>::from_le_bytes(buf) as f64
                }
            }};
        }
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, kind: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
}

fn header_err(line: usize, message: impl Into<String>) -> PlyError {
    PlyError::Header {
        line,
        message: message.into(),
    }
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Header, PlyError> {
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            return Err(header_err(line_no + 1, "unexpected end of file in header"));
        }
        line_no += 1;
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim_end_matches(['\n', '\r']).trim();
        let mut tokens = line.split_whitespace();
        let keyword = tokens.next().unwrap_or("");
        if line_no == 1 {
            if keyword != "ply" {
                return Err(header_err(1, "missing 'ply' magic"));
            }
            continue;
        }
        match keyword {
            "" | "comment" | "obj_info" => {}
            "format" => {
                encoding = Some(match tokens.next() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    Some("binary_big_endian") => PlyEncoding::BinaryBigEndian,
                    other => {
                        return Err(header_err(line_no, format!("unknown format {other:?}")))
                    }
                });
            }
            "element" => {
                let name = tokens
                    .next()
                    .ok_or_else(|| header_err(line_no, "element without name"))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| header_err(line_no, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_err(line_no, "property before any element"))?;
                let first = tokens
                    .next()
                    .ok_or_else(|| header_err(line_no, "property without type"))?;
                let prop = if first == "list" {
                    let count = tokens.next().and_then(Scalar::parse);
                    let item = tokens.next().and_then(Scalar::parse);
                    match (count, item, tokens.next()) {
                        (Some(count), Some(item), Some(_)) => Property::List { count, item },
                        _ => return Err(header_err(line_no, "malformed list property")),
                    }
                } else {
                    let kind = Scalar::parse(first)
                        .ok_or_else(|| header_err(line_no, format!("unknown type {first}")))?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| header_err(line_no, "property without name"))?;
                    Property::Scalar {
                        name: name.to_string(),
                        kind,
                    }
                };
                element.properties.push(prop);
            }
            "end_header" => break,
            other => return Err(header_err(line_no, format!("unexpected keyword {other}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| header_err(line_no, "missing format line"))?;
    Ok(Header { encoding, elements })
}

/// Column positions of the properties we care about within the vertex element.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

fn vertex_layout(element: &Element) -> Result<VertexLayout, PlyError> {
    let find = |names: &[&str]| {
        element.properties.iter().position(|p| {
            matches!(p, Property::Scalar { name, .. } if names.contains(&name.as_str()))
        })
    };
    let xyz = match (find(&["x"]), find(&["y"]), find(&["z"])) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(header_err(0, "vertex element lacks x/y/z properties")),
    };
    let rgb = match (
        find(&["red", "r", "diffuse_red"]),
        find(&["green", "g", "diffuse_green"]),
        find(&["blue", "b", "diffuse_blue"]),
    ) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    Ok(VertexLayout { xyz, rgb })
}

fn to_color(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn build_point(values: &[f64], layout: &VertexLayout, index: usize) -> Result<Point, PlyError> {
    let [x, y, z] = layout.xyz.map(|i| values[i]);
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(PlyError::Body {
            index,
            message: "non-finite coordinate".into(),
        });
    }
    let rgb = layout
        .rgb
        .map_or(Point::WHITE, |idx| idx.map(|i| to_color(values[i])));
    Ok(Point::new(x, y, z, rgb))
}

pub fn read_ply<R: Read>(reader: R) -> Result<PointCloud, PlyError> {
    let mut reader = BufReader::new(reader);
    let header = read_header(&mut reader)?;
    let mut points = Vec::new();
    match header.encoding {
        PlyEncoding::Ascii => read_ascii_body(&mut reader, &header, &mut points)?,
        enc => read_binary_body(
            &mut reader,
            &header,
            enc == PlyEncoding::BinaryBigEndian,
            &mut points,
        )?,
    }
    Ok(PointCloud::from_points(points, ReferenceFrame::World))
}

fn read_ascii_body<R: BufRead>(
    reader: &mut R,
    header: &Header,
    points: &mut Vec<Point>,
) -> Result<(), PlyError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    for element in &header.elements {
        let layout = if element.name == "vertex" {
            Some(vertex_layout(element)?)
        } else {
            None
        };
        for index in 0..element.count {
            let line = lines.next().ok_or_else(|| PlyError::Body {
                index,
                message: format!("missing {} line", element.name),
            })?;
            let Some(layout) = &layout else { continue };
            let mut values = Vec::with_capacity(element.properties.len());
            let mut tokens = line.split_whitespace();
            for prop in &element.properties {
                // float properties are parsed at f32 so ASCII and binary agree
                let parse = |t: Option<&str>, kind: Scalar| -> Result<f64, PlyError> {
                    let v = t.and_then(|t| match kind {
                        Scalar::F32 => t.parse::<f32>().ok().map(f64::from),
                        _ => t.parse::<f64>().ok(),
                    });
                    v.ok_or_else(|| PlyError::Body {
                        index,
                        message: "malformed value".into(),
                    })
                };
                match prop {
                    Property::Scalar { kind, .. } => values.push(parse(tokens.next(), *kind)?),
                    Property::List { count, item } => {
                        let n = parse(tokens.next(), *count)?;
                        if !(n >= 0.0) {
                            return Err(PlyError::Body {
                                index,
                                message: "negative list length".into(),
                            });
                        }
                        for _ in 0..n as usize {
                            parse(tokens.next(), *item)?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            points.push(build_point(&values, layout, index)?);
        }
    }
    Ok(())
}

fn read_binary_body<R: Read>(
    reader: &mut R,
    header: &Header,
    big_endian: bool,
    points: &mut Vec<Point>,
) -> Result<(), PlyError> {
    let mut scratch = [0u8; 8];
    for element in &header.elements {
        let layout = if element.name == "vertex" {
            points.reserve(element.count.min(1 << 24));
            Some(vertex_layout(element)?)
        } else {
            None
        };
        let mut values = vec![0.0; element.properties.len()];
        for index in 0..element.count {
            for (slot, prop) in values.iter_mut().zip(&element.properties) {
                let short = |e: io::Error| PlyError::Body {
                    index,
                    message: format!("truncated {} data: {e}", element.name),
                };
                match prop {
                    Property::Scalar { kind, .. } => {
                        let buf = &mut scratch[..kind.size()];
                        reader.read_exact(buf).map_err(short)?;
                        *slot = kind.decode(buf, big_endian);
                    }
                    Property::List { count, item } => {
                        let buf = &mut scratch[..count.size()];
                        reader.read_exact(buf).map_err(short)?;
                        let n = count.decode(buf, big_endian);
                        if !(n >= 0.0) {
                            return Err(PlyError::Body {
                                index,
                                message: "negative list length".into(),
                            });
                        }
                        let skip = n as u64 * item.size() as u64;
                        let copied = io::copy(&mut reader.by_ref().take(skip), &mut io::sink())?;
                        if copied != skip {
                            return Err(PlyError::Body {
                                index,
                                message: "truncated list data".into(),
                            });
                        }
                        *slot = f64::NAN;
                    }
                }
            }
            if let Some(layout) = &layout {
                points.push(build_point(&values, layout, index)?);
            }
        }
    }
    Ok(())
}

pub fn write_ply<W: Write>(
    mut writer: W,
    cloud: &PointCloud,
    encoding: PlyEncoding,
) -> io::Result<()> {
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
        PlyEncoding::BinaryBigEndian => "binary_big_endian",
    };
    write!(
        writer,
        "ply\nformat {format} 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    match encoding {
        PlyEncoding::Ascii => {
            for p in &cloud.points {
                writeln!(
                    writer,
                    "{} {} {} {} {} {}",
                    p.x as f32, p.y as f32, p.z as f32, p.r, p.g, p.b
                )?;
            }
        }
        PlyEncoding::BinaryLittleEndian | PlyEncoding::BinaryBigEndian => {
            let mut buf = Vec::with_capacity(cloud.len() * 15);
            let be = encoding == PlyEncoding::BinaryBigEndian;
            for p in &cloud.points {
                for c in [p.x as f32, p.y as f32, p.z as f32] {
                    buf.extend_from_slice(&if be { c.to_be_bytes() } else { c.to_le_bytes() });
                }
                buf.extend_from_slice(&p.rgb());
            }
            writer.write_all(&buf)?;
        }
    }
    writer.flush()
}

pub fn read_ply_file(path: impl AsRef<Path>) -> Result<PointCloud, PlyError> {
    read_ply(fs::File::open(path)?)
}

pub fn write_ply_file(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    encoding: PlyEncoding,
) -> io::Result<()> {
    let file = fs::File::create(path)?;
    write_ply(io::BufWriter::new(file), cloud, encoding)
}
