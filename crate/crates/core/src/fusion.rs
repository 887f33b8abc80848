//! LiDAR–camera fusion: pinhole projection with plumb-bob distortion, point
//! colorization from a calibrated image, and multi-sweep accumulation.

use std::io::{BufRead, Read};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::Point3;

/// Pinhole intrinsics with 5-coefficient plumb-bob distortion `(k1, k2, p1, p2, k3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: [f64; 5],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            distortion: [0.0; 5],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        Ok(())
    }

    /// Applies the distortion to normalized image coordinates.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = self.distortion;
        if self.distortion == [0.0; 5] {
            return (x, y);
        }
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        (xd, yd)
    }
}

/// Rigid LiDAR-to-camera transform `q = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsic {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Extrinsic {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Checks `RᵀR = I` and `det R = 1` to 1e-9.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::invalid("extrinsic rotation is not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("extrinsic rotation is not proper (det != 1)"));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        self.pixels[row * self.width + col] = rgb;
    }
}

/// Pixel coordinate of a LiDAR point, or `None` behind the camera or outside the frame.
pub fn project_point(p: &Point3, cam: &CameraModel, ext: &Extrinsic) -> Option<(f64, f64)> {
    let q = ext.apply(p);
    if q[2] <= 1e-6 {
        return None;
    }
    let (xd, yd) = cam.distort(q[0] / q[2], q[1] / q[2]);
    let u = cam.fx * xd + cam.cx;
    let v = cam.fy * yd + cam.cy;
    let inside = u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64;
    inside.then_some((u, v))
}

/// Colors each visible point with its nearest pixel; invisible points are dropped.
pub fn colorize(
    cloud: &PointCloud,
    image: &ColorImage,
    cam: &CameraModel,
    ext: &Extrinsic,
) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot colorize an empty cloud"));
    }
    if image.width != cam.width || image.height != cam.height {
        return Err(Error::invalid(format!(
            "image is {}x{} but the camera model expects {}x{}",
            image.width, image.height, cam.width, cam.height
        )));
    }
    if image.pixels.len() != image.width * image.height {
        return Err(Error::invalid("image pixel count does not match its size"));
    }
    let mut keep = Vec::new();
    let mut colors = Vec::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        if let Some((u, v)) = project_point(p, cam, ext) {
            keep.push(i);
            colors.push(image.get(u.floor() as usize, v.floor() as usize));
        }
    }
    let mut out = cloud.select(&keep);
    out.colors = Some(colors);
    Ok(out)
}

/// Concatenates sweeps already expressed in a common frame.
pub fn accumulate(frames: &[PointCloud]) -> Result<PointCloud> {
    let Some(first) = frames.first() else {
        return Ok(PointCloud::default());
    };
    let colored = first.has_colors();
    let labeled = first.has_labels();
    if frames
        .iter()
        .any(|f| f.has_colors() != colored || f.has_labels() != labeled)
    {
        return Err(Error::invalid("frames disagree on color/label presence"));
    }
    let mut out = PointCloud {
        positions: Vec::new(),
        colors: colored.then(Vec::new),
        labels: labeled.then(Vec::new),
    };
    for f in frames {
        out.positions.extend_from_slice(&f.positions);
        if let (Some(dst), Some(src)) = (out.colors.as_mut(), f.colors.as_ref()) {
            dst.extend_from_slice(src);
        }
        if let (Some(dst), Some(src)) = (out.labels.as_mut(), f.labels.as_ref()) {
            dst.extend_from_slice(src);
        }
    }
    Ok(out)
}

/// Reads a `key=value` calibration file.
///
/// Keys: `fx fy cx cy width height`, optional `k1 k2 p1 p2 k3`, and
/// `extrinsic` holding the 12 entries of `[R | t]` row-major.
pub fn read_calibration<R: BufRead>(reader: R) -> Result<(CameraModel, Extrinsic)> {
    let mut fx = None;
    let mut fy = None;
    let mut cx = None;
    let mut cy = None;
    let mut width = None;
    let mut height = None;
    let mut dist = [0.0; 5];
    let mut ext: Option<Vec<f64>> = None;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(n, "expected key=value"))?;
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(n, format!("invalid number `{}`", s.trim())))
        };
        match key.trim() {
            "fx" => fx = Some(num(value)?),
            "fy" => fy = Some(num(value)?),
            "cx" => cx = Some(num(value)?),
            "cy" => cy = Some(num(value)?),
            "width" => width = Some(num(value)? as usize),
            "height" => height = Some(num(value)? as usize),
            "k1" => dist[0] = num(value)?,
            "k2" => dist[1] = num(value)?,
            "p1" => dist[2] = num(value)?,
            "p2" => dist[3] = num(value)?,
            "k3" => dist[4] = num(value)?,
            "extrinsic" => {
                let vals = value
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|s| !s.is_empty())
                    .map(num)
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() != 12 {
                    return Err(Error::parse(n, format!("extrinsic needs 12 values, got {}", vals.len())));
                }
                ext = Some(vals);
            }
            other => return Err(Error::parse(n, format!("unknown calibration key `{other}`"))),
        }
    }
    let need = |v: Option<f64>, k: &str| v.ok_or_else(|| Error::parse(0, format!("missing `{k}`")));
    let cam = CameraModel {
        fx: need(fx, "fx")?,
        fy: need(fy, "fy")?,
        cx: need(cx, "cx")?,
        cy: need(cy, "cy")?,
        distortion: dist,
        width: width.ok_or_else(|| Error::parse(0, "missing `width`"))?,
        height: height.ok_or_else(|| Error::parse(0, "missing `height`"))?,
    };
    cam.validate()?;
    let e = ext.ok_or_else(|| Error::parse(0, "missing `extrinsic`"))?;
    let extrinsic = Extrinsic {
        rotation: [[e[0], e[1], e[2]], [e[4], e[5], e[6]], [e[8], e[9], e[10]]],
        translation: [e[3], e[7], e[11]],
    };
    extrinsic.validate()?;
    Ok((cam, extrinsic))
}

/// Reads a PPM image, ASCII (`P3`) or 8-bit binary (`P6`).
pub fn read_ppm<R: Read>(mut reader: R) -> Result<ColorImage> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut line = 1;
    // header tokens, skipping whitespace and comments
    let token = |pos: &mut usize, line: &mut usize| -> Result<String> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => {
                    if *b == b'\n' {
                        *line += 1;
                    }
                    *pos += 1;
                }
                Some(_) => break,
                None => return Err(Error::parse(*line, "unexpected end of PPM data")),
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos, &mut line)?;
    let binary = match magic.as_str() {
        "P6" => true,
        "P3" => false,
        m => return Err(Error::parse(line, format!("unsupported PPM magic `{m}`"))),
    };
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let t = token(&mut pos, &mut line)?;
        *d = t
            .parse()
            .map_err(|_| Error::parse(line, format!("invalid PPM header value `{t}`")))?;
    }
    let [width, height, maxval] = dims;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(line, format!("unsupported PPM maxval {maxval}")));
    }
    let n = width * height;
    let scale = 1.0 / maxval as f64;
    let mut pixels = Vec::with_capacity(n);
    if binary {
        pos += 1; // single whitespace after maxval
        let data = bytes
            .get(pos..pos + 3 * n)
            .ok_or_else(|| Error::parse(line, "truncated P6 pixel data"))?;
        for px in data.chunks_exact(3) {
            pixels.push([0, 1, 2].map(|c| px[c] as f64 * scale));
        }
    } else {
        for _ in 0..n {
            let mut rgb = [0.0; 3];
            for c in &mut rgb {
                let t = token(&mut pos, &mut line)?;
                let v: usize = t
                    .parse()
                    .map_err(|_| Error::parse(line, format!("invalid pixel value `{t}`")))?;
                if v > maxval {
                    return Err(Error::parse(line, format!("pixel value {v} exceeds maxval")));
                }
                *c = v as f64 * scale;
            }
            pixels.push(rgb);
        }
    }
    Ok(ColorImage {
        width,
        height,
        pixels,
    })
}

/// Writes a binary `P6` image.
pub fn write_ppm<W: std::io::Write>(img: &ColorImage, w: &mut W) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let mut data = Vec::with_capacity(img.pixels.len() * 3);
    for p in &img.pixels {
        data.extend(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    w.write_all(&data)?;
    Ok(())
}
