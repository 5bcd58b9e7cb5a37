use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SchemeError;
use crate::runtime::{payload, Bindings, CallCtx, Emit, LogicError, Payload};
use crate::tensor::DenseTensor;

/// One bounding box. Coordinates are normalized to the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u32,
    pub leaf: u32,
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub score: f32,
    pub class: u32,
}

/// The boxes one leaf found in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame: u32,
    pub leaf: u32,
    pub boxes: Vec<Detection>,
}

/// `meta i64 [n, 3]` of (frame, leaf, box count), `boxes f32 [total, 5]` of
/// (x, y, w, h, score), `classes i64 [total]`. Row-wise concatenation of two
/// encodings encodes the concatenated records.
pub fn encode_detections(records: &[FrameDetections]) -> Vec<DenseTensor> {
    let mut meta = Vec::with_capacity(records.len() * 3);
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    for r in records {
        meta.extend([r.frame as i64, r.leaf as i64, r.boxes.len() as i64]);
        for d in &r.boxes {
            boxes.extend([d.x, d.y, d.w, d.h, d.score]);
            classes.push(d.class as i64);
        }
    }
    let total = classes.len() as u32;
    vec![
        DenseTensor::from_i64(vec![records.len() as u32, 3], meta).expect("meta shape"),
        DenseTensor::from_f32(vec![total, 5], boxes).expect("box shape"),
        DenseTensor::from_i64(vec![total], classes).expect("class shape"),
    ]
}

pub fn decode_detections(tensors: &[DenseTensor]) -> Result<Vec<FrameDetections>, LogicError> {
    let [meta, boxes, classes] = tensors else {
        return Err(LogicError::other(format!("expected 3 detection tensors, got {}", tensors.len())));
    };
    let (meta, boxes, classes) = (meta.as_i64()?, boxes.as_f32()?, classes.as_i64()?);
    if meta.len() % 3 != 0 || boxes.len() != classes.len() * 5 {
        return Err(LogicError::other("inconsistent detection tensors"));
    }
    let mut at = 0usize;
    let mut out = Vec::with_capacity(meta.len() / 3);
    for m in meta.chunks_exact(3) {
        let (frame, leaf, n) = (m[0] as u32, m[1] as u32, m[2] as usize);
        if at + n > classes.len() {
            return Err(LogicError::other("box counts exceed the box tensor"));
        }
        let boxes = (at..at + n)
            .map(|i| {
                let b = &boxes[i * 5..i * 5 + 5];
                Detection {
                    frame,
                    leaf,
                    x: b[0],
                    y: b[1],
                    w: b[2],
                    h: b[3],
                    score: b[4],
                    class: classes[i] as u32,
                }
            })
            .collect();
        at += n;
        out.push(FrameDetections { frame, leaf, boxes });
    }
    if at != classes.len() {
        return Err(LogicError::other("boxes left over after the last frame record"));
    }
    Ok(out)
}

pub trait Detector: Send {
    fn detect(&mut self, leaf: u32, frame: u32, image: &DenseTensor) -> Vec<Detection>;
}

/// Builds the detector of one leaf.
pub type DetectorFactory = Arc<dyn Fn(u32) -> Box<dyn Detector> + Send + Sync>;

/// Deterministic stand-in for a real detector: boxes are drawn from an RNG
/// keyed by the seed and the frame contents.
#[derive(Debug, Clone)]
pub struct StubDetector {
    pub seed: u64,
    pub classes: u32,
    pub max_boxes: u32,
}

impl StubDetector {
    pub fn new(seed: u64) -> Self {
        StubDetector {
            seed,
            classes: 4,
            max_boxes: 3,
        }
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn frame_hash(image: &DenseTensor) -> u64 {
    match image.as_f32() {
        Ok(v) => fnv1a(v.iter().flat_map(|x| x.to_le_bytes())),
        Err(_) => fnv1a(image.shape().iter().flat_map(|d| d.to_le_bytes())),
    }
}

impl Detector for StubDetector {
    fn detect(&mut self, leaf: u32, frame: u32, image: &DenseTensor) -> Vec<Detection> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ frame_hash(image) ^ (frame as u64).rotate_left(17));
        let n = rng.gen_range(0..=self.max_boxes);
        (0..n)
            .map(|_| {
                let (x, y): (f32, f32) = (rng.gen(), rng.gen());
                Detection {
                    frame,
                    leaf,
                    x,
                    y,
                    w: rng.gen::<f32>() * (1.0 - x),
                    h: rng.gen::<f32>() * (1.0 - y),
                    score: 1.0 - rng.gen::<f32>(),
                    class: rng.gen_range(0..self.classes.max(1)),
                }
            })
            .collect()
    }
}

/// `count` frames of `h x w` noise for one leaf.
pub fn synthetic_frames(seed: u64, leaf: u32, count: u32, h: u32, w: u32) -> Vec<DenseTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED).wrapping_mul(leaf as u64 + 1));
    (0..count)
        .map(|_| DenseTensor::from_f32(vec![h, w], (0..h * w).map(|_| rng.gen()).collect()).expect("frame shape"))
        .collect()
}

/// Raw frame file: u32 count, u32 H, u32 W (little-endian), then f32 pixels.
pub fn read_frames(path: &Path) -> Result<Vec<DenseTensor>, SchemeError> {
    let io = |message: String| SchemeError::Io {
        path: path.display().to_string(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| io(e.to_string()))?;
    let word = |i: usize| -> Result<u32, SchemeError> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| io("truncated header".into()))
    };
    let (count, h, w) = (word(0)?, word(1)?, word(2)?);
    let per = h as usize * w as usize;
    let need = 12 + count as usize * per * 4;
    if bytes.len() != need {
        return Err(io(format!("expected {need} bytes for {count} frames of {h}x{w}, found {}", bytes.len())));
    }
    Ok(bytes[12..]
        .chunks_exact(per * 4)
        .map(|f| {
            let px = f.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            DenseTensor::from_f32(vec![h, w], px).expect("frame shape")
        })
        .collect())
}

pub fn write_frames(path: &Path, frames: &[DenseTensor]) -> Result<(), SchemeError> {
    let io = |message: String| SchemeError::Io {
        path: path.display().to_string(),
        message,
    };
    let (h, w) = match frames.first().map(|f| f.shape()) {
        Some([h, w]) => (*h, *w),
        Some(s) => return Err(io(format!("frames must be 2-D, got {s:?}"))),
        None => (0, 0),
    };
    let mut out = Vec::new();
    for v in [frames.len() as u32, h, w] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in frames {
        if f.shape() != [h, w] {
            return Err(io(format!("frame of shape {:?} in a {h}x{w} stream", f.shape())));
        }
        for x in f.as_f32().map_err(|e| io(e.to_string()))? {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| io(e.to_string()))
}

#[derive(Debug, Default)]
pub struct TreeLog {
    /// Every box the leaves produced.
    pub emitted: Mutex<Vec<Detection>>,
    /// Every box that reached the root.
    pub alerts: Mutex<Vec<Detection>>,
}

impl TreeLog {
    pub fn alerts(&self) -> Vec<Detection> {
        self.alerts.lock().expect("log").clone()
    }

    pub fn emitted(&self) -> Vec<Detection> {
        self.emitted.lock().expect("log").clone()
    }

    pub fn alerts_jsonl(&self) -> String {
        self.alerts()
            .iter()
            .map(|d| serde_json::to_string(d).expect("detection serialises") + "\n")
            .collect()
    }
}

#[derive(Clone)]
pub struct TreeSetup {
    pub threshold: f32,
    /// Frame stream of each leaf.
    pub frames: Arc<Vec<Vec<DenseTensor>>>,
    pub detector: DetectorFactory,
    pub log: Arc<TreeLog>,
}

impl TreeSetup {
    /// Synthetic streams and the stub detector.
    pub fn synthetic(seed: u64, leaves: u32, frames: u32, threshold: f32) -> Self {
        TreeSetup {
            threshold,
            frames: Arc::new((0..leaves).map(|l| synthetic_frames(seed, l, frames, 8, 8)).collect()),
            detector: Arc::new(move |_| Box::new(StubDetector::new(seed))),
            log: Arc::new(TreeLog::default()),
        }
    }
}

/// `init`, `infer`, `combine` and `alert`. Leaves process frame `round - 1`
/// and end the stream once their frames run out.
pub fn tree_bindings(setup: &TreeSetup) -> Bindings {
    let infer = setup.clone();
    let alert_log = Arc::clone(&setup.log);
    let tau = setup.threshold;
    Bindings::new()
        .with_fn("init", |_, _| Ok(Emit::Data(payload(Vec::new()))))
        .with_logic("infer", move |site| {
            let leaf = site.replica.unwrap_or(0);
            let mut detector = (infer.detector)(leaf);
            let (frames, log) = (Arc::clone(&infer.frames), Arc::clone(&infer.log));
            Box::new(move |ctx: &CallCtx, _: &[Payload]| {
                let stream = frames.get(leaf as usize).map(Vec::as_slice).unwrap_or(&[]);
                let Some(image) = ctx.round.checked_sub(1).and_then(|i| stream.get(i as usize)) else {
                    return Ok(Emit::End);
                };
                let frame = ctx.round - 1;
                let boxes = detector.detect(leaf, frame, image);
                log.emitted.lock().expect("log").extend(boxes.iter().copied());
                Ok(Emit::Data(payload(encode_detections(&[FrameDetections { frame, leaf, boxes }]))))
            })
        })
        .with_fn("combine", move |_, inputs| {
            let mut records = Vec::new();
            for p in inputs {
                records.extend(decode_detections(p)?);
            }
            for r in &mut records {
                r.boxes.retain(|d| d.score > tau);
            }
            Ok(Emit::Data(payload(encode_detections(&records))))
        })
        .with_fn("alert", move |_, inputs| {
            let mut log = alert_log.alerts.lock().expect("log");
            for p in inputs {
                for r in decode_detections(p)? {
                    log.extend(r.boxes);
                }
            }
            Ok(Emit::Data(payload(Vec::new())))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{compile, predict_counts};
    use crate::runtime::{run_local, RunOptions};
    use crate::schemes::{build_tree_inference, FederationConfig};

    fn run(leaves: u32, combiners: u32, frames: u32, tau: f32) -> (TreeSetup, crate::runtime::RunOutput) {
        let s = TreeSetup::synthetic(11, leaves, frames, tau);
        let b = tree_bindings(&s);
        let p = build_tree_inference(&FederationConfig::tree(leaves, combiners, tau)).unwrap();
        let out = run_local(&compile(&p, &b).unwrap(), &b, &RunOptions::default()).unwrap();
        (s, out)
    }

    #[test]
    fn root_sees_exactly_the_boxes_above_threshold() {
        for tau in [0.0, 0.3, 0.75, 1.0] {
            let (s, _) = run(2, 1, 20, tau);
            let emitted = s.log.emitted();
            let expected: Vec<Detection> = emitted.iter().copied().filter(|d| d.score > tau).collect();
            let mut got = s.log.alerts();
            let key = |d: &Detection| (d.frame, d.leaf, d.x.to_bits());
            let mut want = expected.clone();
            got.sort_by_key(key);
            want.sort_by_key(key);
            assert_eq!(got, want, "tau {tau}");
        }
        let (s, _) = run(2, 1, 20, 0.0);
        assert_eq!(s.log.alerts().len(), s.log.emitted().len());
        assert!(!s.log.emitted().is_empty());
    }

    #[test]
    fn deeper_tree_terminates_with_predicted_traffic() {
        let (s, out) = run(6, 3, 5, 0.5);
        assert_eq!(s.log.emitted().iter().map(|d| d.frame).max(), Some(4));
        let g = &out.trace;
        // Every channel below the root carries one message per frame.
        let graph = compile(
            &build_tree_inference(&FederationConfig::tree(6, 3, 0.5)).unwrap(),
            &tree_bindings(&s),
        )
        .unwrap();
        let predicted = predict_counts(&graph, Some(5)).unwrap();
        for (c, ch) in graph.channels.iter().enumerate() {
            if graph.node(ch.src).guard.is_none() {
                assert_eq!(g.channels[c].messages, predicted[c], "channel {c}");
            }
        }
    }

    #[test]
    fn codec_round_trip_and_concat() {
        let det = |frame, score| Detection {
            frame,
            leaf: 1,
            x: 0.1,
            y: 0.2,
            w: 0.3,
            h: 0.4,
            score,
            class: 2,
        };
        let a = vec![FrameDetections {
            frame: 0,
            leaf: 1,
            boxes: vec![det(0, 0.9), det(0, 0.2)],
        }];
        let b = vec![FrameDetections {
            frame: 1,
            leaf: 1,
            boxes: vec![],
        }];
        assert_eq!(decode_detections(&encode_detections(&a)).unwrap(), a);
        let joined = crate::runtime::fold(
            &crate::runtime::Concat,
            &[payload(encode_detections(&a)), payload(encode_detections(&b))],
        )
        .unwrap();
        let both: Vec<FrameDetections> = a.iter().chain(&b).cloned().collect();
        assert_eq!(decode_detections(&joined).unwrap(), both);
        assert!(decode_detections(&encode_detections(&[])[..2]).is_err());
    }

    #[test]
    fn stub_is_deterministic_and_in_range() {
        let frames = synthetic_frames(3, 0, 50, 4, 4);
        let mut a = StubDetector::new(9);
        let mut b = StubDetector::new(9);
        for (i, f) in frames.iter().enumerate() {
            let d = a.detect(0, i as u32, f);
            assert_eq!(d, b.detect(0, i as u32, f));
            for x in &d {
                assert!((0.0..=1.0).contains(&x.score) && x.score > 0.0);
                assert!(x.x + x.w <= 1.0 && x.y + x.h <= 1.0);
            }
        }
    }

    #[test]
    fn frame_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.raw");
        let frames = synthetic_frames(1, 0, 3, 2, 5);
        write_frames(&path, &frames).unwrap();
        assert_eq!(read_frames(&path).unwrap(), frames);
        std::fs::write(&path, [1, 0, 0, 0]).unwrap();
        assert!(read_frames(&path).is_err());
    }
}
