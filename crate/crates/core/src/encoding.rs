//! Spike representations and the encoders that produce them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `[steps × features]` spike raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpikeTrain {
    steps: usize,
    features: usize,
    data: Vec<u8>,
}

impl SpikeTrain {
    pub fn new(steps: usize, features: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != steps * features {
            return Err(Error::Dimension(format!(
                "spike train [{steps} × {features}] needs {} values, got {}",
                steps * features,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Domain("spike values must be 0 or 1".into()));
        }
        Ok(Self {
            steps,
            features,
            data,
        })
    }

    pub fn zeros(steps: usize, features: usize) -> Self {
        Self {
            steps,
            features,
            data: vec![0; steps * features],
        }
    }

    /// Accepts a `[T × F]` tensor whose entries are exactly 0 or 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (steps, features) = t.dims2()?;
        let mut data = Vec::with_capacity(t.len());
        for &v in t.data() {
            data.push(match v {
                0.0 => 0,
                1.0 => 1,
                _ => return Err(Error::Domain(format!("non-binary spike value {v}"))),
            });
        }
        Ok(Self {
            steps,
            features,
            data,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize) -> u8 {
        self.data[t * self.features + f]
    }

    pub fn set(&mut self, t: usize, f: usize, on: bool) {
        self.data[t * self.features + f] = u8::from(on);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.steps, self.features],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn spike_count(&self) -> usize {
        self.data.iter().map(|&v| usize::from(v)).sum()
    }

    /// Fraction of active voxels.
    pub fn density(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.spike_count() as f64 / self.data.len() as f64
        }
    }

    /// Time-averaged firing rate per feature, each a multiple of `1/steps`.
    pub fn rate_decode(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.features];
        for row in self.data.chunks(self.features) {
            out.iter_mut().zip(row).for_each(|(o, &s)| *o += f64::from(s));
        }
        out.iter_mut().for_each(|o| *o /= self.steps as f64);
        out
    }
}

/// Single-channel image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl StaticImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, label: usize) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            label,
        })
    }
}

/// Independent Bernoulli(p) spike per pixel per step.
pub fn rate_encode(img: &StaticImage, steps: usize, seed: u64) -> Result<SpikeTrain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rate_encode_with(&img.pixels, steps, &mut rng)
}

pub fn rate_encode_with<R: Rng>(probs: &[f64], steps: usize, rng: &mut R) -> Result<SpikeTrain> {
    if steps == 0 {
        return Err(Error::Domain("need at least one time step".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("rate {p} outside [0, 1]")));
    }
    Ok(bernoulli_sample(probs, steps, rng))
}

/// `steps` rows of Bernoulli spikes with per-feature rates `probs`.
fn bernoulli_sample<R: Rng>(probs: &[f64], steps: usize, rng: &mut R) -> SpikeTrain {
    let mut data = Vec::with_capacity(steps * probs.len());
    for _ in 0..steps {
        for &p in probs {
            data.push(u8::from(rng.gen::<f64>() < p));
        }
    }
    SpikeTrain {
        steps,
        features: probs.len(),
        data,
    }
}

/// One Bernoulli draw per element of a `[steps × F]` parameter tensor.
pub fn sample_params<R: Rng>(params: &[f64], steps: usize, rng: &mut R) -> SpikeTrain {
    let features = params.len() / steps;
    let data = params.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();
    SpikeTrain {
        steps,
        features,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    /// `+1` or `−1`.
    pub polarity: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    events: Vec<Event>,
}

impl EventStream {
    /// Sorts by timestamp (stable) and checks coordinates and polarity.
    pub fn new(width: usize, height: usize, mut events: Vec<Event>) -> Result<Self> {
        for e in &events {
            if usize::from(e.x) >= width || usize::from(e.y) >= height {
                return Err(Error::Domain(format!(
                    "event at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.polarity != 1 && e.polarity != -1 {
                return Err(Error::Domain(format!("polarity {} not ±1", e.polarity)));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            width,
            height,
            events,
        })
    }

    /// Re-validates the stream against a known sensor size.
    pub fn with_extents(self, width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, self.events)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Bins a stream into `windows` equal slices of `[t_min, t_max]` (last slice closed).
///
/// A voxel is set iff at least one event of the retained polarity falls in it.
pub fn bin_events(ev: &EventStream, windows: usize, polarity: i8) -> Result<SpikeTrain> {
    bin_events_pooled(ev, windows, polarity, 1)
}

/// [`bin_events`] followed by `factor×factor` average pooling thresholded at 0.5
/// within each window.
pub fn bin_events_pooled(ev: &EventStream, windows: usize, polarity: i8, factor: usize) -> Result<SpikeTrain> {
    if windows == 0 {
        return Err(Error::Domain("need at least one window".into()));
    }
    if ev.is_empty() {
        return Err(Error::Domain("empty event stream".into()));
    }
    if factor == 0 || ev.width % factor != 0 || ev.height % factor != 0 {
        return Err(Error::Config(format!(
            "pool factor {factor} does not divide {}x{}",
            ev.width, ev.height
        )));
    }
    let t_min = ev.events.first().map_or(0, |e| e.t);
    let t_max = ev.events.last().map_or(0, |e| e.t);
    let span = t_max - t_min;
    let features = ev.width * ev.height;
    let mut full = vec![0u8; windows * features];
    for e in ev.events.iter().filter(|e| e.polarity == polarity) {
        let w = if span == 0 {
            0
        } else {
            let idx = (u128::from(e.t - t_min) * windows as u128 / u128::from(span)) as usize;
            idx.min(windows - 1)
        };
        full[w * features + usize::from(e.y) * ev.width + usize::from(e.x)] = 1;
    }
    if factor == 1 {
        return SpikeTrain::new(windows, features, full);
    }
    let (pw, ph) = (ev.width / factor, ev.height / factor);
    let mut pooled = vec![0u8; windows * pw * ph];
    let area = (factor * factor) as f64;
    for w in 0..windows {
        for py in 0..ph {
            for px in 0..pw {
                let mut n = 0usize;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let (x, y) = (px * factor + dx, py * factor + dy);
                        n += usize::from(full[w * features + y * ev.width + x]);
                    }
                }
                pooled[w * pw * ph + py * pw + px] = u8::from(n as f64 / area >= 0.5);
            }
        }
    }
    SpikeTrain::new(windows, pw * ph, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(p: f64) -> StaticImage {
        StaticImage::new(2, 2, vec![p; 4], 0).unwrap()
    }

    #[test]
    fn extreme_rates() {
        let zero = rate_encode(&img(0.0), 25, 1).unwrap();
        assert_eq!(zero.spike_count(), 0);
        let one = rate_encode(&img(1.0), 25, 1).unwrap();
        assert_eq!(one.spike_count(), 100);
    }

    #[test]
    fn half_rate_concentrates() {
        // 10k trials of Binomial(25, 0.5): mean count has sd 0.025, so [12, 13] is ~20 sd wide.
        let image = StaticImage::new(1, 1, vec![0.5], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let total: usize = (0..10_000)
            .map(|_| rate_encode_with(&image.pixels, 25, &mut rng).unwrap().spike_count())
            .sum();
        let mean = total as f64 / 10_000.0;
        assert!((12.0..=13.0).contains(&mean), "{mean}");
    }

    #[test]
    fn time_average_converges_to_pixel() {
        let pixels = vec![0.1, 0.35, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 4000;
        let mut acc = [0.0; 3];
        for _ in 0..trials {
            let s = rate_encode_with(&pixels, 25, &mut rng).unwrap();
            for (a, r) in acc.iter_mut().zip(s.rate_decode()) {
                *a += r / trials as f64;
            }
        }
        for (a, p) in acc.iter().zip(&pixels) {
            // 5 sd of the mean of 100k Bernoulli draws
            let sd = (p * (1.0 - p) / (25.0 * trials as f64)).sqrt();
            assert!((a - p).abs() < 5.0 * sd, "{a} vs {p}");
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(StaticImage::new(1, 1, vec![1.2], 0).is_err());
        assert!(matches!(rate_encode_with(&[-0.1], 3, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Domain(_))));
    }

    fn ev(x: u16, y: u16, t: u64, polarity: i8) -> Event {
        Event { x, y, t, polarity }
    }

    #[test]
    fn binning_examples() {
        let one = EventStream::new(4, 4, vec![ev(1, 2, 10, 1)]).unwrap();
        let s = bin_events(&one, 3, 1).unwrap();
        assert_eq!(s.spike_count(), 1);
        assert_eq!(s.get(0, 2 * 4 + 1), 1);

        let dup = EventStream::new(4, 4, vec![ev(1, 1, 0, 1), ev(1, 1, 1, 1), ev(3, 3, 100, -1)]).unwrap();
        let s = bin_events(&dup, 2, 1).unwrap();
        assert_eq!(s.get(0, 5), 1);
        assert_eq!(s.spike_count(), 1);

        let neg = EventStream::new(4, 4, vec![ev(0, 0, 0, -1), ev(2, 2, 5, -1)]).unwrap();
        assert_eq!(bin_events(&neg, 4, 1).unwrap().spike_count(), 0);

        let empty = EventStream::new(4, 4, vec![]).unwrap();
        assert!(matches!(bin_events(&empty, 2, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn last_window_is_closed_on_the_right() {
        let s = EventStream::new(2, 1, vec![ev(0, 0, 0, 1), ev(1, 0, 100, 1)]).unwrap();
        let b = bin_events(&s, 4, 1).unwrap();
        assert_eq!(b.get(0, 0), 1);
        assert_eq!(b.get(3, 1), 1);
    }

    #[test]
    fn pooled_binning_thresholds_half_the_block() {
        let s = EventStream::new(4, 2, vec![ev(0, 0, 0, 1), ev(1, 1, 0, 1), ev(2, 0, 0, 1)]).unwrap();
        let b = bin_events_pooled(&s, 1, 1, 2).unwrap();
        assert_eq!(b.features(), 2);
        assert_eq!(b.data(), &[1, 0]);
        assert!(bin_events_pooled(&s, 1, 1, 3).is_err());
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        prop::collection::vec((0u16..6, 0u16..5, 0u64..1000, prop::bool::ANY), 1..60).prop_map(|v| {
            let events = v
                .into_iter()
                .map(|(x, y, t, p)| ev(x, y, t, if p { 1 } else { -1 }))
                .collect();
            EventStream::new(6, 5, events).unwrap()
        })
    }

    proptest! {
        #[test]
        fn binning_is_binary_and_polarity_filtered(stream in arb_stream(), windows in 1usize..8) {
            let b = bin_events(&stream, windows, 1).unwrap();
            prop_assert!(b.data().iter().all(|&v| v <= 1));
            let positives = stream.events().iter().filter(|e| e.polarity == 1).count();
            prop_assert!(b.spike_count() <= positives);
            let flipped: Vec<Event> = stream.events().iter().map(|e| Event { polarity: -e.polarity, ..*e }).collect();
            let mirror = bin_events(&EventStream::new(6, 5, flipped).unwrap(), windows, -1).unwrap();
            prop_assert_eq!(b, mirror);
        }

        #[test]
        fn binning_ignores_duplicates(stream in arb_stream(), windows in 1usize..8) {
            let mut doubled = stream.events().to_vec();
            doubled.extend_from_slice(stream.events());
            let twice = EventStream::new(6, 5, doubled).unwrap();
            prop_assert_eq!(bin_events(&stream, windows, 1).unwrap(), bin_events(&twice, windows, 1).unwrap());
        }
    }
}
