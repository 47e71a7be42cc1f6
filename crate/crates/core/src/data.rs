//! Dataset readers and deterministic synthetic fixtures.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{Event, EventStream, StaticImage};
use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Reads an IDX image/label file pair; pixels are scaled by 1/255.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Vec<StaticImage>> {
    let img = read(images)?;
    let lab = read(labels)?;
    if be_u32(&img, 0, images)? != IDX_IMAGES {
        return Err(Error::Format(format!("{}: bad image magic", images.display())));
    }
    if be_u32(&lab, 0, labels)? != IDX_LABELS {
        return Err(Error::Format(format!("{}: bad label magic", labels.display())));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let n_labels = be_u32(&lab, 4, labels)? as usize;
    if n != n_labels {
        return Err(Error::Format(format!(
            "image count {n} does not match label count {n_labels}"
        )));
    }
    let px = rows * cols;
    if img.len() != 16 + n * px {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            images.display(),
            16 + n * px,
            img.len()
        )));
    }
    if lab.len() != 8 + n {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            labels.display(),
            8 + n,
            lab.len()
        )));
    }
    img[16..]
        .chunks(px)
        .zip(&lab[8..])
        .map(|(p, &l)| {
            StaticImage::new(rows, cols, p.iter().map(|&b| f64::from(b) / 255.0).collect(), usize::from(l))
        })
        .collect()
}

/// Writes an IDX image/label pair (used for fixtures and exports).
pub fn write_mnist_idx(images: &Path, labels: &Path, data: &[StaticImage]) -> Result<()> {
    let (rows, cols) = data.first().map_or((0, 0), |d| (d.height, d.width));
    let mut img = Vec::with_capacity(16 + data.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    for v in [data.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for d in data {
        img.extend(d.pixels.iter().map(|p| (p * 255.0).round() as u8));
        lab.push(d.label as u8);
    }
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

/// Parses `x,y,t,polarity` lines (optional header); sensor extents are inferred.
pub fn load_event_csv(path: &Path) -> Result<EventStream> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_event_csv(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_event_csv(text: &str) -> Result<EventStream> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields.iter().any(|f| f.parse::<i64>().is_err()) {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}: `{line}`", i + 1));
        let [x, y, t, p] = fields[..] else {
            return Err(bad("expected 4 fields"));
        };
        let x: u16 = x.parse().map_err(|_| bad("bad x"))?;
        let y: u16 = y.parse().map_err(|_| bad("bad y"))?;
        let t: u64 = t.parse().map_err(|_| bad("bad timestamp"))?;
        let polarity: i8 = match p {
            "1" | "+1" => 1,
            "-1" => -1,
            _ => return Err(bad("polarity must be 1 or -1")),
        };
        events.push(Event { x, y, t, polarity });
    }
    let width = events.iter().map(|e| usize::from(e.x) + 1).max().unwrap_or(0);
    let height = events.iter().map(|e| usize::from(e.y) + 1).max().unwrap_or(0);
    EventStream::new(width, height, events)
}

pub fn write_event_csv(path: &Path, ev: &EventStream) -> Result<()> {
    let mut s = String::from("x,y,t,polarity\n");
    for e in ev.events() {
        s.push_str(&format!("{},{},{},{}\n", e.x, e.y, e.t, e.polarity));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads `<dir>/<label>/*.csv` event recordings onto a common sensor size.
pub fn load_event_dir(dir: &Path, width: usize, height: usize) -> Result<Vec<(EventStream, usize)>> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name().to_string_lossy().into_owned();
        let label: usize = name
            .parse()
            .map_err(|_| Error::Format(format!("class directory `{name}` is not a class index")))?;
        let mut files: Vec<_> = fs::read_dir(entry.path())
            .map_err(|e| Error::io(entry.path(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for f in files {
            out.push((load_event_csv(&f)?.with_extents(width, height)?, label));
        }
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no event recordings", dir.display())));
    }
    Ok(out)
}

/// Seeded shuffle split into `(train, validation)` index lists.
pub fn shuffle_split(n: usize, validation: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n - validation.min(n));
    (idx, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Geometry {
    /// Bars, diagonals, blobs and outlines at class-specific places.
    #[default]
    Shapes,
    /// Gaussian blobs on a ring, one angle per class.
    Blobs,
}

impl Geometry {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Self::Shapes),
            "blobs" => Ok(Self::Blobs),
            _ => Err(Error::Config(format!("unknown geometry `{s}`"))),
        }
    }
}

pub const SYNTH_SIDE: usize = 16;

/// Class prototype intensity at `(y, x)` before jitter and noise.
fn prototype(class: usize, classes: usize, geometry: Geometry, y: f64, x: f64) -> f64 {
    let s = SYNTH_SIDE as f64;
    let line = |d: f64, half: f64| (1.0 - (d.abs() - half).max(0.0)).clamp(0.0, 1.0);
    let blob = |cy: f64, cx: f64, r: f64| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp();
    let within = |v: f64, lo: f64, hi: f64| if v >= lo && v <= hi { 1.0 } else { 0.0 };
    match geometry {
        Geometry::Blobs => {
            let a = std::f64::consts::TAU * class as f64 / classes as f64;
            blob(s / 2.0 - 0.5 + 4.5 * a.sin(), s / 2.0 - 0.5 + 4.5 * a.cos(), 1.8)
        }
        Geometry::Shapes => match class % 10 {
            0 => line(y - 3.0, 0.5) * within(x, 3.0, 12.0),
            1 => line(y - 12.0, 0.5) * within(x, 3.0, 12.0),
            2 => line(x - 3.0, 0.5) * within(y, 3.0, 12.0),
            3 => line(x - 12.0, 0.5) * within(y, 3.0, 12.0),
            4 => line(y - x, 0.7) * within(x, 2.0, 13.0),
            5 => line(y + x - (s - 1.0), 0.7) * within(x, 2.0, 13.0),
            6 => blob(4.5, 4.5, 1.8),
            7 => blob(10.5, 10.5, 1.8),
            8 => {
                let ring = line(y - 4.0, 0.3).max(line(y - 11.0, 0.3)) * within(x, 4.0, 11.0);
                ring.max(line(x - 4.0, 0.3).max(line(x - 11.0, 0.3)) * within(y, 4.0, 11.0))
            }
            _ => (line(y - 7.5, 0.5) * within(x, 4.0, 11.0)).max(line(x - 7.5, 0.5) * within(y, 4.0, 11.0)),
        },
    }
}

/// Deterministic labeled `16×16` images with class-specific shapes.
///
/// Each sample jitters its prototype by up to one pixel, scales its
/// intensity in `[0.6, 1]`, and adds background noise in `[0, 0.15]`.
pub fn synth_dataset(classes: usize, per_class: usize, geometry: Geometry, seed: u64) -> Result<Vec<StaticImage>> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if geometry == Geometry::Shapes && classes > 10 {
        return Err(Error::Config("the shapes geometry has 10 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for class in 0..classes {
            let dy = f64::from(rng.gen_range(-1i32..=1));
            let dx = f64::from(rng.gen_range(-1i32..=1));
            let gain = rng.gen_range(0.6..=1.0);
            let mut pixels = Vec::with_capacity(SYNTH_SIDE * SYNTH_SIDE);
            for y in 0..SYNTH_SIDE {
                for x in 0..SYNTH_SIDE {
                    let v = gain * prototype(class, classes, geometry, y as f64 - dy, x as f64 - dx);
                    let noise = rng.gen_range(0.0..0.15);
                    pixels.push((v + noise).clamp(0.0, 1.0));
                }
            }
            out.push(StaticImage::new(SYNTH_SIDE, SYNTH_SIDE, pixels, class)?);
        }
    }
    Ok(out)
}

/// Deterministic synthetic event recordings on a `16×16` sensor, up to 4 classes.
///
/// 0: bar sweeping right through the top half; 1: bar sweeping down through
/// the left half; 2: ring expanding from the centre; 3: bar sweeping left
/// through the bottom half. Leading edges emit `+1`, trailing edges `−1`,
/// plus uniform background noise of both polarities.
pub fn synth_event_dataset(classes: usize, per_class: usize, seed: u64) -> Result<Vec<(EventStream, usize)>> {
    if !(2..=4).contains(&classes) {
        return Err(Error::Config(format!("synthetic events support 2..=4 classes, got {classes}")));
    }
    let side = SYNTH_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for class in 0..classes {
            let duration: u64 = rng.gen_range(80_000..120_000);
            let frames = 16u64;
            let offset: i64 = rng.gen_range(-1..=1);
            let mut events = Vec::new();
            for f in 0..frames {
                let t0 = f * duration / frames;
                let pos = f as i64;
                let mut emit = |x: i64, y: i64, polarity: i8, rng: &mut ChaCha8Rng| {
                    if (0..side as i64).contains(&x) && (0..side as i64).contains(&y) && rng.gen_bool(0.85) {
                        events.push(Event {
                            x: x as u16,
                            y: y as u16,
                            t: t0 + rng.gen_range(0..duration / frames),
                            polarity,
                        });
                    }
                };
                match class {
                    0 => {
                        for y in (1 + offset)..(7 + offset) {
                            emit(pos, y, 1, &mut rng);
                            emit(pos - 2, y, -1, &mut rng);
                        }
                    }
                    1 => {
                        for x in (1 + offset)..(7 + offset) {
                            emit(x, pos, 1, &mut rng);
                            emit(x, pos - 2, -1, &mut rng);
                        }
                    }
                    2 => {
                        let r = f as f64 * 0.5;
                        let c = side as f64 / 2.0 - 0.5 + offset as f64;
                        for k in 0..24 {
                            let a = std::f64::consts::TAU * k as f64 / 24.0;
                            let (x, y) = ((c + r * a.cos()).round() as i64, (c + r * a.sin()).round() as i64);
                            emit(x, y, 1, &mut rng);
                        }
                    }
                    _ => {
                        for y in (9 + offset)..(15 + offset) {
                            emit(side as i64 - 1 - pos, y, 1, &mut rng);
                            emit(side as i64 + 1 - pos, y, -1, &mut rng);
                        }
                    }
                }
            }
            for _ in 0..12 {
                events.push(Event {
                    x: rng.gen_range(0..side as u16),
                    y: rng.gen_range(0..side as u16),
                    t: rng.gen_range(0..duration),
                    polarity: if rng.gen_bool(0.5) { 1 } else { -1 },
                });
            }
            out.push((EventStream::new(side, side, events)?, class));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let data = vec![
            StaticImage::new(2, 2, vec![0.0, 1.0, 0.2, 0.4], 3).unwrap(),
            StaticImage::new(2, 2, vec![1.0, 1.0, 0.0, 0.0], 7).unwrap(),
        ];
        write_mnist_idx(&ip, &lp, &data).unwrap();
        let back = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].pixels[1], 1.0);
        assert_eq!(back[1].label, 7);
        assert!((back[0].pixels[2] - 51.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let data = vec![StaticImage::new(2, 2, vec![0.5; 4], 1).unwrap()];
        write_mnist_idx(&ip, &lp, &data).unwrap();
        let mut bytes = fs::read(&ip).unwrap();
        bytes.pop();
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Format(_))));

        write_mnist_idx(&ip, &lp, &data).unwrap();
        let mut bytes = fs::read(&lp).unwrap();
        bytes[3] = 0x03;
        fs::write(&lp, &bytes).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp, lp2) = (dir.path().join("i"), dir.path().join("l"), dir.path().join("l2"));
        let two = vec![StaticImage::new(1, 1, vec![0.5], 1).unwrap(); 2];
        write_mnist_idx(&ip, &lp, &two).unwrap();
        write_mnist_idx(&dir.path().join("x"), &lp2, &two[..1]).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp2), Err(Error::Format(_))));
    }

    #[test]
    fn event_csv_parsing() {
        let s = parse_event_csv("1,2,100,1").unwrap();
        assert_eq!(s.events(), &[Event { x: 1, y: 2, t: 100, polarity: 1 }]);

        let s = parse_event_csv("x,y,t,polarity\n0,0,50,-1\n3,1,10,1\n").unwrap();
        assert_eq!(s.events()[0].t, 10);
        assert_eq!((s.width, s.height), (4, 2));

        match parse_event_csv("x,y,t,p\n1,1,5,1\n1,1,6,0\n") {
            Err(Error::Format(m)) => assert!(m.contains("line 3"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(parse_event_csv("1,2,3").is_err());
    }

    #[test]
    fn synth_is_deterministic_and_distinct() {
        let a = synth_dataset(10, 3, Geometry::Shapes, 5).unwrap();
        let b = synth_dataset(10, 3, Geometry::Shapes, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(10, 3, Geometry::Shapes, 6).unwrap();
        assert_ne!(a, c);
        let px = SYNTH_SIDE * SYNTH_SIDE;
        let means: Vec<Vec<f64>> = (0..10)
            .map(|k| {
                let mut m = vec![0.0; px];
                for d in a.iter().filter(|d| d.label == k) {
                    m.iter_mut().zip(&d.pixels).for_each(|(m, p)| *m += p / 3.0);
                }
                m
            })
            .collect();
        for i in 0..10 {
            for j in i + 1..10 {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1.0, "classes {i} and {j} too close: {d}");
            }
        }
        assert!(synth_dataset(1, 3, Geometry::Shapes, 0).is_err());
    }

    #[test]
    fn two_class_synth_is_linearly_separable() {
        // train-and-check oracle: perceptron on mean-centred pixels
        let data = synth_dataset(2, 40, Geometry::Blobs, 11).unwrap();
        let n = SYNTH_SIDE * SYNTH_SIDE;
        let mut w = vec![0.0; n + 1];
        for _ in 0..50 {
            for d in &data {
                let y = if d.label == 1 { 1.0 } else { -1.0 };
                let s: f64 = w[n] + w[..n].iter().zip(&d.pixels).map(|(a, b)| a * b).sum::<f64>();
                if s * y <= 0.0 {
                    w[..n].iter_mut().zip(&d.pixels).for_each(|(a, b)| *a += y * b);
                    w[n] += y;
                }
            }
        }
        let correct = data
            .iter()
            .filter(|d| {
                let s: f64 = w[n] + w[..n].iter().zip(&d.pixels).map(|(a, b)| a * b).sum::<f64>();
                (s > 0.0) == (d.label == 1)
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn synth_events_are_valid() {
        let a = synth_event_dataset(4, 2, 3).unwrap();
        assert_eq!(a, synth_event_dataset(4, 2, 3).unwrap());
        assert_eq!(a.len(), 8);
        for (s, _) in &a {
            assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
            assert!(s.events().iter().any(|e| e.polarity == 1));
        }
    }

    #[test]
    fn split_is_a_partition() {
        let (tr, va) = shuffle_split(100, 20, 1);
        assert_eq!(va.len(), 20);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
