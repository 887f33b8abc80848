use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    PcdAscii,
}

impl CloudFormat {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path
            .extension()?
            .to_str()?
            .to_ascii_lowercase()
            .as_str()
        {
            "ply" => Some(CloudFormat::PlyAscii),
            "pcd" => Some(CloudFormat::PcdAscii),
            _ => None,
        }
    }
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let reader = BufReader::new(File::open(path)?);
    match format {
        CloudFormat::PlyAscii => read_ply(reader),
        CloudFormat::PcdAscii => read_pcd(reader),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        CloudFormat::PlyAscii => write_ply(cloud, &mut w)?,
        CloudFormat::PcdAscii => write_pcd(cloud, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn color_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("cannot parse {what} from `{tok}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite {what} `{tok}`")));
    }
    Ok(v)
}

fn parse_color(tok: &str, line: usize) -> Result<f64> {
    let v = parse_f64(tok, line, "color")?;
    if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
        return Err(Error::parse(line, format!("color `{tok}` is not a byte value")));
    }
    Ok(v / 255.0)
}

fn parse_label(tok: &str, line: usize) -> Result<u32> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid label `{tok}`")))
}

/// Column slots of the fields this crate understands.
#[derive(Default)]
struct Columns {
    xyz: [Option<usize>; 3],
    rgb: [Option<usize>; 3],
    packed_rgb: Option<(usize, bool)>,
    label: Option<usize>,
    width: usize,
}

impl Columns {
    fn has_colors(&self) -> bool {
        self.packed_rgb.is_some() || self.rgb.iter().all(Option::is_some)
    }

    fn parse_row(&self, toks: &[&str], line: usize, cloud: &mut PointCloud) -> Result<()> {
        if toks.len() != self.width {
            return Err(Error::parse(
                line,
                format!("expected {} values, found {}", self.width, toks.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (a, slot) in self.xyz.iter().enumerate() {
            p[a] = parse_f64(toks[slot.unwrap()], line, "coordinate")?;
        }
        cloud.positions.push(p);
        if let Some(colors) = cloud.colors.as_mut() {
            let rgb = if let Some((col, is_float)) = self.packed_rgb {
                let bits = if is_float {
                    (parse_f64(toks[col], line, "rgb")? as f32).to_bits()
                } else {
                    toks[col]
                        .parse::<u32>()
                        .map_err(|_| Error::parse(line, format!("invalid rgb `{}`", toks[col])))?
                };
                [
                    ((bits >> 16) & 0xff) as f64 / 255.0,
                    ((bits >> 8) & 0xff) as f64 / 255.0,
                    (bits & 0xff) as f64 / 255.0,
                ]
            } else {
                let mut c = [0.0; 3];
                for (a, slot) in self.rgb.iter().enumerate() {
                    c[a] = parse_color(toks[slot.unwrap()], line)?;
                }
                c
            };
            colors.push(rgb);
        }
        if let (Some(labels), Some(col)) = (cloud.labels.as_mut(), self.label) {
            labels.push(parse_label(toks[col], line)?);
        }
        Ok(())
    }

    fn empty_cloud(&self, capacity: usize) -> PointCloud {
        PointCloud {
            positions: Vec::with_capacity(capacity),
            colors: self.has_colors().then(|| Vec::with_capacity(capacity)),
            labels: self.label.map(|_| Vec::with_capacity(capacity)),
        }
    }
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// Reads an ASCII PLY stream. Only the `vertex` element is kept; other elements are skipped.
pub fn read_ply<R: BufRead>(reader: R) -> Result<PointCloud> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(Error::parse(0, format!("unexpected end of file, expected {what}"))),
        }
    };

    let (n, magic) = next("`ply`")?;
    if magic.trim() != "ply" {
        return Err(Error::parse(n, "missing `ply` magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let (n, line) = next("`end_header`")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => {
                return Err(Error::parse(n, format!("unsupported PLY format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(n, format!("invalid element count `{count}`")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(n, "property before element"))?;
                if el.name == "vertex" {
                    return Err(Error::parse(n, "list properties on vertices are not supported"));
                }
                el.props.push(String::from("list"));
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(n, "property before element"))?;
                el.props.push(name.to_string());
            }
            _ => return Err(Error::parse(n, format!("unrecognized header line `{line}`"))),
        }
    }
    if !saw_format {
        return Err(Error::parse(0, "missing `format` line"));
    }
    let vertex = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(0, "no `vertex` element declared"))?;

    let props = &elements[vertex].props;
    let find = |name: &str| props.iter().position(|p| p == name);
    let mut cols = Columns {
        xyz: [find("x"), find("y"), find("z")],
        rgb: [find("red"), find("green"), find("blue")],
        label: find("label"),
        width: props.len(),
        ..Default::default()
    };
    if cols.xyz.iter().any(Option::is_none) {
        return Err(Error::parse(0, "vertex element lacks x, y, z properties"));
    }
    if cols.rgb.iter().any(Option::is_some) && !cols.rgb.iter().all(Option::is_some) {
        return Err(Error::parse(0, "incomplete red/green/blue properties"));
    }
    if !cols.rgb.iter().all(Option::is_some) {
        cols.rgb = [None; 3];
    }

    let mut cloud = cols.empty_cloud(elements[vertex].count);
    for (ei, el) in elements.iter().enumerate() {
        for _ in 0..el.count {
            let (n, line) = next("element data")?;
            if ei == vertex {
                let toks: Vec<&str> = line.split_whitespace().collect();
                cols.parse_row(&toks, n, &mut cloud)?;
            }
        }
    }
    for (n, rest) in lines {
        if !rest?.trim().is_empty() {
            return Err(Error::parse(n, "data beyond the declared element counts"));
        }
    }
    Ok(cloud)
}

pub fn write_ply<W: Write>(cloud: &PointCloud, w: &mut W) -> Result<()> {
    cloud.validate(None)?;
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}")?;
    }
    if cloud.has_colors() {
        for ch in ["red", "green", "blue"] {
            writeln!(w, "property uchar {ch}")?;
        }
    }
    if cloud.has_labels() {
        writeln!(w, "property int label")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        if let Some(c) = &cloud.colors {
            let c = c[i];
            write!(w, " {} {} {}", color_byte(c[0]), color_byte(c[1]), color_byte(c[2]))?;
        }
        if let Some(l) = &cloud.labels {
            write!(w, " {}", l[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads an ASCII PCD (v0.7) stream with fields `x y z [rgb] [label]`.
pub fn read_pcd<R: BufRead>(reader: R) -> Result<PointCloud> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut fields: Vec<String> = Vec::new();
    let mut types: Vec<String> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut points: Option<usize> = None;
    let mut wh = (None, None);
    loop {
        let (n, line) = match lines.next() {
            Some((n, l)) => (n, l?),
            None => return Err(Error::parse(0, "unexpected end of file, expected DATA")),
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let key = toks.next().unwrap_or_default().to_ascii_uppercase();
        let rest: Vec<&str> = toks.collect();
        let usize_of = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(n, format!("invalid integer `{s}`")))
        };
        match key.as_str() {
            "VERSION" | "SIZE" | "VIEWPOINT" => {}
            "FIELDS" | "COLUMNS" => fields = rest.iter().map(|s| s.to_string()).collect(),
            "TYPE" => types = rest.iter().map(|s| s.to_ascii_uppercase()).collect(),
            "COUNT" => counts = rest.iter().map(|s| usize_of(s)).collect::<Result<_>>()?,
            "WIDTH" => wh.0 = Some(usize_of(rest.first().copied().unwrap_or(""))?),
            "HEIGHT" => wh.1 = Some(usize_of(rest.first().copied().unwrap_or(""))?),
            "POINTS" => points = Some(usize_of(rest.first().copied().unwrap_or(""))?),
            "DATA" => {
                if rest.first().map(|s| s.to_ascii_lowercase()) != Some("ascii".into()) {
                    return Err(Error::parse(n, "only `DATA ascii` is supported"));
                }
                break;
            }
            other => return Err(Error::parse(n, format!("unrecognized header key `{other}`"))),
        }
    }
    if counts.is_empty() {
        counts = vec![1; fields.len()];
    }
    if counts.len() != fields.len() || (!types.is_empty() && types.len() != fields.len()) {
        return Err(Error::parse(0, "FIELDS/TYPE/COUNT lengths disagree"));
    }
    let npts = match (points, wh) {
        (Some(p), _) => p,
        (None, (Some(w), Some(h))) => w * h,
        (None, (Some(w), None)) => w,
        _ => return Err(Error::parse(0, "missing POINTS")),
    };
    // column offset of each field
    let mut offsets = Vec::with_capacity(fields.len());
    let mut width = 0;
    for c in &counts {
        offsets.push(width);
        width += c;
    }
    let find = |name: &str| fields.iter().position(|f| f == name).map(|i| offsets[i]);
    let mut cols = Columns {
        xyz: [find("x"), find("y"), find("z")],
        label: find("label"),
        width,
        ..Default::default()
    };
    if cols.xyz.iter().any(Option::is_none) {
        return Err(Error::parse(0, "FIELDS lacks x, y, z"));
    }
    if let Some(fi) = fields.iter().position(|f| f == "rgb" || f == "rgba") {
        let is_float = types.get(fi).map(|t| t == "F").unwrap_or(true);
        cols.packed_rgb = Some((offsets[fi], is_float));
    }

    let mut cloud = cols.empty_cloud(npts);
    let mut seen = 0;
    for (n, line) in lines {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if seen == npts {
            return Err(Error::parse(n, "more data rows than POINTS declares"));
        }
        cols.parse_row(&toks, n, &mut cloud)?;
        seen += 1;
    }
    if seen != npts {
        return Err(Error::parse(
            0,
            format!("POINTS declares {npts} rows but {seen} were found"),
        ));
    }
    Ok(cloud)
}

pub fn write_pcd<W: Write>(cloud: &PointCloud, w: &mut W) -> Result<()> {
    cloud.validate(None)?;
    let mut fields = vec!["x", "y", "z"];
    let mut types = vec!["F", "F", "F"];
    if cloud.has_colors() {
        fields.push("rgb");
        types.push("U");
    }
    if cloud.has_labels() {
        fields.push("label");
        types.push("U");
    }
    let n = cloud.len();
    writeln!(w, "# .PCD v0.7 - Point Cloud Data file format")?;
    writeln!(w, "VERSION 0.7")?;
    writeln!(w, "FIELDS {}", fields.join(" "))?;
    writeln!(w, "SIZE {}", vec!["4"; fields.len()].join(" "))?;
    writeln!(w, "TYPE {}", types.join(" "))?;
    writeln!(w, "COUNT {}", vec!["1"; fields.len()].join(" "))?;
    writeln!(w, "WIDTH {n}")?;
    writeln!(w, "HEIGHT 1")?;
    writeln!(w, "VIEWPOINT 0 0 0 1 0 0 0")?;
    writeln!(w, "POINTS {n}")?;
    writeln!(w, "DATA ascii")?;
    for i in 0..n {
        let p = cloud.positions[i];
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        if let Some(c) = &cloud.colors {
            let c = c[i];
            let packed = (color_byte(c[0]) as u32) << 16
                | (color_byte(c[1]) as u32) << 8
                | color_byte(c[2]) as u32;
            write!(w, " {packed}")?;
        }
        if let Some(l) = &cloud.labels {
            write!(w, " {}", l[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)])
            .collect();
        let colors = (0..n)
            .map(|_| [0; 3].map(|_: i32| rng.random_range(0..=255u32) as f64 / 255.0))
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
        PointCloud::from_positions(positions)
            .with_colors(colors)
            .with_labels(labels)
    }

    #[test]
    fn minimal_ply_without_color() {
        let src = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0.5\n";
        let c = read_ply(src.as_bytes()).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.colors.is_none());
        assert!(c.labels.is_none());
        assert_eq!(c.positions[2], [0.0, 1.0, 0.5]);
    }

    #[test]
    fn ply_color_bytes_rescale() {
        let src = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n1 2 3 255 0 0\n";
        let c = read_ply(src.as_bytes()).unwrap();
        assert_eq!(c.colors.unwrap()[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ply_errors_name_the_line() {
        let src = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 nan 0\n";
        match read_ply(src.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("expected parse error, got {other:?}"),
        }
        let short = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(matches!(read_ply(short.as_bytes()), Err(Error::Parse { .. })));
        let long = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
        match read_ply(long.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_header = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n";
        assert!(matches!(read_ply(bad_header.as_bytes()), Err(Error::Parse { .. })));
        let wrong_width = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0\n";
        match read_ply(wrong_width.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ply_skips_face_elements() {
        let src = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 1\n1 1 1 0\n3 0 1 1\n";
        let c = read_ply(src.as_bytes()).unwrap();
        assert_eq!(c.positions, vec![[0.0; 3], [1.0; 3]]);
    }

    #[test]
    fn empty_cloud_writes_valid_files() {
        for fmt in [CloudFormat::PlyAscii, CloudFormat::PcdAscii] {
            let mut buf = Vec::new();
            let c = PointCloud::default();
            match fmt {
                CloudFormat::PlyAscii => write_ply(&c, &mut buf).unwrap(),
                CloudFormat::PcdAscii => write_pcd(&c, &mut buf).unwrap(),
            }
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.contains(" 0\n"));
            let back = match fmt {
                CloudFormat::PlyAscii => read_ply(buf.as_slice()).unwrap(),
                CloudFormat::PcdAscii => read_pcd(buf.as_slice()).unwrap(),
            };
            assert!(back.is_empty());
        }
    }

    #[test]
    fn labels_appear_as_a_property() {
        let c = PointCloud::from_positions(vec![[0.0; 3]]).with_labels(vec![1]);
        let mut buf = Vec::new();
        write_ply(&c, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("property int label"));
    }

    #[test]
    fn round_trip_random_cloud_both_formats() {
        let c = random_cloud(1000, 7);
        for fmt in [CloudFormat::PlyAscii, CloudFormat::PcdAscii] {
            let mut buf = Vec::new();
            match fmt {
                CloudFormat::PlyAscii => write_ply(&c, &mut buf).unwrap(),
                CloudFormat::PcdAscii => write_pcd(&c, &mut buf).unwrap(),
            }
            let back = match fmt {
                CloudFormat::PlyAscii => read_ply(buf.as_slice()).unwrap(),
                CloudFormat::PcdAscii => read_pcd(buf.as_slice()).unwrap(),
            };
            assert_eq!(back.len(), c.len());
            for (a, b) in back.positions.iter().zip(&c.positions) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() <= 1e-6);
                }
            }
            let bytes = |cl: &PointCloud| -> Vec<[u8; 3]> {
                cl.colors.as_ref().unwrap().iter().map(|c| c.map(color_byte)).collect()
            };
            assert_eq!(bytes(&back), bytes(&c));
            assert_eq!(back.labels, c.labels);
        }
    }

    #[test]
    fn pcd_float_packed_rgb() {
        let bits: u32 = (10 << 16) | (20 << 8) | 30;
        let f = f32::from_bits(bits);
        let src = format!(
            "VERSION 0.7\nFIELDS x y z rgb\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nWIDTH 1\nHEIGHT 1\nPOINTS 1\nDATA ascii\n1 2 3 {f:e}\n"
        );
        let c = read_pcd(src.as_bytes()).unwrap();
        let col = c.colors.unwrap()[0];
        assert_eq!(col.map(color_byte), [10, 20, 30]);
    }

    #[test]
    fn pcd_count_mismatch_is_an_error() {
        let src = "VERSION 0.7\nFIELDS x y z\nPOINTS 2\nDATA ascii\n1 2 3\n";
        assert!(matches!(read_pcd(src.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn file_round_trip_and_format_detection() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_cloud(20, 3);
        for name in ["a.ply", "b.pcd"] {
            let path = dir.path().join(name);
            let fmt = CloudFormat::from_path(&path).unwrap();
            write_cloud(&c, &path, fmt).unwrap();
            let back = read_cloud(&path, fmt).unwrap();
            assert_eq!(back.labels, c.labels);
        }
        assert_eq!(CloudFormat::from_path(Path::new("x.txt")), None);
    }
}
