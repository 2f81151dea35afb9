//! Shared vocabulary, token layouts, loss masks and attention masks.
//!
//! A training sample is `[BOS, t_o, TASK, A, B]` where `t_o` are the
//! observation image tokens and `A`, `B` are the target camera and target
//! image tokens in one of the two chain-rule orders:
//!
//! * [`Ordering::CamThenImg`]: `p(c|o)·p(i|c,o)`, task token `TASK_CAM_FIRST`
//! * [`Ordering::ImgThenCam`]: `p(i|o)·p(c|i,o)`, task token `TASK_POSE_FIRST`
//!
//! Vocabulary ids: image tokens `[0, K_i)`, camera tokens `[K_i, K_i+K_c)`,
//! then `BOS`, `TASK_POSE_FIRST`, `TASK_CAM_FIRST`, so the two task tokens
//! are the largest ids.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SequenceError {
    #[error("token grids differ in shape or modality: {0}")]
    GridMismatch(&'static str),
    #[error("id {id} at position {position} is outside the {expected} range")]
    ModalityViolation { position: usize, id: u32, expected: &'static str },
    #[error("malformed layout: {0}")]
    MalformedLayout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Camera,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Camera => "camera",
        }
    }
}

/// Local codebook indices of one tokenized image or camera map, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<u32>,
    pub modality: Modality,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, indices: Vec<u32>, modality: Modality) -> Result<Self, SequenceError> {
        if indices.len() != height * width {
            return Err(SequenceError::GridMismatch("index count does not match grid shape"));
        }
        Ok(Self { height, width, indices, modality })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    CamThenImg,
    ImgThenCam,
}

impl Ordering {
    pub fn first(self) -> Modality {
        match self {
            Ordering::CamThenImg => Modality::Camera,
            Ordering::ImgThenCam => Modality::Image,
        }
    }

    pub fn second(self) -> Modality {
        match self {
            Ordering::CamThenImg => Modality::Image,
            Ordering::ImgThenCam => Modality::Camera,
        }
    }
}

/// What a vocabulary id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Image(u32),
    Camera(u32),
    Bos,
    Task(Ordering),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub image_size: u32,
    pub camera_size: u32,
}

impl Vocabulary {
    pub fn new(image_size: u32, camera_size: u32) -> Self {
        Self { image_size, camera_size }
    }

    pub fn size(&self) -> u32 {
        self.image_size + self.camera_size + 3
    }

    pub fn bos(&self) -> u32 {
        self.image_size + self.camera_size
    }

    pub fn task_pose_first(&self) -> u32 {
        self.image_size + self.camera_size + 1
    }

    pub fn task_cam_first(&self) -> u32 {
        self.image_size + self.camera_size + 2
    }

    pub fn task_token(&self, ordering: Ordering) -> u32 {
        match ordering {
            Ordering::CamThenImg => self.task_cam_first(),
            Ordering::ImgThenCam => self.task_pose_first(),
        }
    }

    pub fn range(&self, modality: Modality) -> Range<u32> {
        match modality {
            Modality::Image => 0..self.image_size,
            Modality::Camera => self.image_size..self.image_size + self.camera_size,
        }
    }

    pub fn local_size(&self, modality: Modality) -> u32 {
        match modality {
            Modality::Image => self.image_size,
            Modality::Camera => self.camera_size,
        }
    }

    pub fn to_global(&self, modality: Modality, local: u32) -> u32 {
        debug_assert!(local < self.local_size(modality));
        self.range(modality).start + local
    }

    pub fn classify(&self, id: u32) -> Option<TokenKind> {
        let ki = self.image_size;
        let kc = self.camera_size;
        if id < ki {
            Some(TokenKind::Image(id))
        } else if id < ki + kc {
            Some(TokenKind::Camera(id - ki))
        } else if id == self.bos() {
            Some(TokenKind::Bos)
        } else if id == self.task_pose_first() {
            Some(TokenKind::Task(Ordering::ImgThenCam))
        } else if id == self.task_cam_first() {
            Some(TokenKind::Task(Ordering::CamThenImg))
        } else {
            None
        }
    }
}

/// Role of a position in the sequence; feeds a learned segment embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Special = 0,
    Observation = 1,
    TargetImage = 2,
    TargetCamera = 3,
}

pub const NUM_SEGMENTS: usize = 4;

impl Segment {
    pub fn target(modality: Modality) -> Self {
        match modality {
            Modality::Image => Segment::TargetImage,
            Modality::Camera => Segment::TargetCamera,
        }
    }
}

/// Position of a token for rotary embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionTag {
    /// BOS and task tokens, numbered in order of appearance.
    Scalar(u32),
    Grid { row: u32, col: u32, segment: Segment },
}

impl PositionTag {
    /// Row/column fed to 2D RoPE. Scalar positions use indices past the grid
    /// extent so they never coincide with a grid cell.
    pub fn rope_coords(&self, grid_height: usize, grid_width: usize) -> (u32, u32) {
        match *self {
            PositionTag::Scalar(i) => (grid_height as u32 + i, grid_width as u32 + i),
            PositionTag::Grid { row, col, .. } => (row, col),
        }
    }

    pub fn segment(&self) -> Segment {
        match *self {
            PositionTag::Scalar(_) => Segment::Special,
            PositionTag::Grid { segment, .. } => segment,
        }
    }
}

fn grid_tags(h: usize, w: usize, segment: Segment) -> impl Iterator<Item = PositionTag> {
    (0..h * w).map(move |i| PositionTag::Grid { row: (i / w) as u32, col: (i % w) as u32, segment })
}

/// A fully assembled training or inference sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleLayout {
    pub ids: Vec<u32>,
    pub tags: Vec<PositionTag>,
    pub loss_mask: Vec<bool>,
    /// `None` for packed sequences, which hold both orderings.
    pub ordering: Option<Ordering>,
    pub grid: (usize, usize),
}

impl SampleLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn segment_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Restricts the loss to the final segment, for single-task training.
    pub fn with_loss_on_second_only(mut self) -> Self {
        let l = self.segment_len();
        let n = self.ids.len();
        for (p, m) in self.loss_mask.iter_mut().enumerate() {
            *m = p >= n - l;
        }
        self
    }
}

/// Tags of the ordered `[BOS, t_o, TASK, A, B]` layout.
pub fn ordered_tags(ordering: Ordering, h: usize, w: usize) -> Vec<PositionTag> {
    let mut tags = Vec::with_capacity(3 * h * w + 2);
    tags.push(PositionTag::Scalar(0));
    tags.extend(grid_tags(h, w, Segment::Observation));
    tags.push(PositionTag::Scalar(1));
    tags.extend(grid_tags(h, w, Segment::target(ordering.first())));
    tags.extend(grid_tags(h, w, Segment::target(ordering.second())));
    tags
}

/// Vocabulary range a token at `position` of the ordered layout must fall
/// in. Used for constrained decoding.
pub fn allowed_range(vocab: &Vocabulary, ordering: Ordering, segment_len: usize, position: usize) -> Range<u32> {
    let l = segment_len;
    match position {
        0 => vocab.bos()..vocab.bos() + 1,
        p if p <= l => vocab.range(Modality::Image),
        p if p == l + 1 => {
            let t = vocab.task_token(ordering);
            t..t + 1
        }
        p if p < 2 * l + 2 => vocab.range(ordering.first()),
        _ => vocab.range(ordering.second()),
    }
}

fn check_grid(grid: &TokenGrid, shape: (usize, usize), modality: Modality, vocab: &Vocabulary) -> Result<(), SequenceError> {
    if (grid.height, grid.width) != shape || grid.indices.len() != shape.0 * shape.1 {
        return Err(SequenceError::GridMismatch("grid shapes differ"));
    }
    if grid.modality != modality {
        return Err(SequenceError::GridMismatch("unexpected modality"));
    }
    let limit = vocab.local_size(modality);
    if let Some(p) = grid.indices.iter().position(|&k| k >= limit) {
        return Err(SequenceError::ModalityViolation {
            position: p,
            id: grid.indices[p],
            expected: modality.name(),
        });
    }
    Ok(())
}

fn push_grid(ids: &mut Vec<u32>, vocab: &Vocabulary, grid: &TokenGrid) {
    ids.extend(grid.indices.iter().map(|&k| vocab.to_global(grid.modality, k)));
}

/// Assembles `[BOS, t_o, TASK, A, B]` with the loss on `A` and `B`.
pub fn build_sequence(
    vocab: &Vocabulary,
    observation: &TokenGrid,
    image: &TokenGrid,
    camera: &TokenGrid,
    ordering: Ordering,
) -> Result<SampleLayout, SequenceError> {
    let shape = (observation.height, observation.width);
    check_grid(observation, shape, Modality::Image, vocab)?;
    check_grid(image, shape, Modality::Image, vocab)?;
    check_grid(camera, shape, Modality::Camera, vocab)?;
    let l = shape.0 * shape.1;
    let (first, second) = match ordering {
        Ordering::CamThenImg => (camera, image),
        Ordering::ImgThenCam => (image, camera),
    };
    let mut ids = Vec::with_capacity(3 * l + 2);
    ids.push(vocab.bos());
    push_grid(&mut ids, vocab, observation);
    ids.push(vocab.task_token(ordering));
    push_grid(&mut ids, vocab, first);
    push_grid(&mut ids, vocab, second);
    let loss_mask = (0..ids.len()).map(|p| p >= l + 2).collect();
    Ok(SampleLayout {
        ids,
        tags: ordered_tags(ordering, shape.0, shape.1),
        loss_mask,
        ordering: Some(ordering),
        grid: shape,
    })
}

/// Both orderings in one `5L+3` sequence:
/// `[BOS, t_o, TASK_CAM_FIRST, t_c, t_i, TASK_POSE_FIRST, t_i, t_c]`.
/// Pair with [`MaskMode::PackedJoint`] so the second branch only sees the
/// observation prefix.
pub fn build_packed_sequence(
    vocab: &Vocabulary,
    observation: &TokenGrid,
    image: &TokenGrid,
    camera: &TokenGrid,
) -> Result<SampleLayout, SequenceError> {
    let first = build_sequence(vocab, observation, image, camera, Ordering::CamThenImg)?;
    let (h, w) = first.grid;
    let l = h * w;
    let mut ids = first.ids;
    let mut tags = first.tags;
    ids.push(vocab.task_pose_first());
    tags.push(PositionTag::Scalar(2));
    push_grid(&mut ids, vocab, image);
    tags.extend(grid_tags(h, w, Segment::TargetImage));
    push_grid(&mut ids, vocab, camera);
    tags.extend(grid_tags(h, w, Segment::TargetCamera));
    let branch2 = 3 * l + 2;
    let loss_mask = (0..ids.len()).map(|p| (p >= l + 2 && p < branch2) || p > branch2).collect();
    Ok(SampleLayout { ids, tags, loss_mask, ordering: None, grid: (h, w) })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSequence {
    pub observation: TokenGrid,
    pub ordering: Ordering,
    pub first: TokenGrid,
    pub second: TokenGrid,
}

impl ParsedSequence {
    pub fn image(&self) -> &TokenGrid {
        match self.ordering {
            Ordering::CamThenImg => &self.second,
            Ordering::ImgThenCam => &self.first,
        }
    }

    pub fn camera(&self) -> &TokenGrid {
        match self.ordering {
            Ordering::CamThenImg => &self.first,
            Ordering::ImgThenCam => &self.second,
        }
    }
}

fn take_segment(
    ids: &[u32],
    start: usize,
    shape: (usize, usize),
    modality: Modality,
    vocab: &Vocabulary,
) -> Result<TokenGrid, SequenceError> {
    let l = shape.0 * shape.1;
    let range = vocab.range(modality);
    let mut local = Vec::with_capacity(l);
    for (offset, &id) in ids[start..start + l].iter().enumerate() {
        if !range.contains(&id) {
            return Err(SequenceError::ModalityViolation {
                position: start + offset,
                id,
                expected: modality.name(),
            });
        }
        local.push(id - range.start);
    }
    Ok(TokenGrid { height: shape.0, width: shape.1, indices: local, modality })
}

/// Inverse of [`build_sequence`].
pub fn parse_sequence(ids: &[u32], vocab: &Vocabulary, shape: (usize, usize)) -> Result<ParsedSequence, SequenceError> {
    let l = shape.0 * shape.1;
    if ids.len() != 3 * l + 2 {
        return Err(SequenceError::MalformedLayout(format!(
            "expected {} ids, got {}",
            3 * l + 2,
            ids.len()
        )));
    }
    if ids[0] != vocab.bos() {
        return Err(SequenceError::MalformedLayout(format!("position 0 holds {} instead of BOS", ids[0])));
    }
    let ordering = match vocab.classify(ids[l + 1]) {
        Some(TokenKind::Task(o)) => o,
        _ => {
            return Err(SequenceError::MalformedLayout(format!(
                "position {} holds {} instead of a task token",
                l + 1,
                ids[l + 1]
            )))
        }
    };
    let observation = take_segment(ids, 1, shape, Modality::Image, vocab)?;
    let first = take_segment(ids, l + 2, shape, ordering.first(), vocab)?;
    let second = take_segment(ids, 2 * l + 2, shape, ordering.second(), vocab)?;
    Ok(ParsedSequence { observation, ordering, first, second })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    OrderedCausal,
    PackedJoint,
    Alternating,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::OrderedCausal => "ORDERED_CAUSAL",
            MaskMode::PackedJoint => "PACKED_JOINT",
            MaskMode::Alternating => "ALTERNATING",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ORDERED_CAUSAL" => Some(MaskMode::OrderedCausal),
            "PACKED_JOINT" => Some(MaskMode::PackedJoint),
            "ALTERNATING" => Some(MaskMode::Alternating),
            _ => None,
        }
    }

    /// Sequence length for segment length `l`.
    pub fn sequence_len(self, l: usize) -> usize {
        match self {
            MaskMode::OrderedCausal | MaskMode::Alternating => 3 * l + 2,
            MaskMode::PackedJoint => 5 * l + 3,
        }
    }
}

/// `allows(q, k)` is true when query position `q` may attend to key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub mode: MaskMode,
    pub segment_len: usize,
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.size + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.size..(q + 1) * self.size]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Top-left `n×n` block, used when the last token is never an input.
    pub fn truncated(&self, n: usize) -> AttentionMask {
        assert!(n <= self.size);
        let mut bits = Vec::with_capacity(n * n);
        for q in 0..n {
            bits.extend_from_slice(&self.row(q)[..n]);
        }
        AttentionMask { mode: self.mode, segment_len: self.segment_len, size: n, bits }
    }

    pub fn causal(size: usize) -> AttentionMask {
        let mut bits = vec![false; size * size];
        for q in 0..size {
            for k in 0..=q {
                bits[q * size + k] = true;
            }
        }
        AttentionMask { mode: MaskMode::OrderedCausal, segment_len: 0, size, bits }
    }

    /// Run-length text encoding used for golden files: a header line
    /// `mode=<MODE> L=<l> size=<n>` then one line per row of alternating
    /// `T<count>`/`F<count>` runs.
    pub fn to_rle(&self) -> String {
        let mut out = format!("mode={} L={} size={}\n", self.mode.name(), self.segment_len, self.size);
        for q in 0..self.size {
            let row = self.row(q);
            let mut runs: Vec<String> = Vec::new();
            let mut start = 0;
            while start < row.len() {
                let v = row[start];
                let mut end = start;
                while end < row.len() && row[end] == v {
                    end += 1;
                }
                runs.push(format!("{}{}", if v { 'T' } else { 'F' }, end - start));
                start = end;
            }
            out.push_str(&runs.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_rle(text: &str) -> Result<AttentionMask, SequenceError> {
        let bad = |m: &str| SequenceError::MalformedLayout(String::from(m));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty mask file"))?;
        let mut mode = None;
        let mut segment_len = None;
        let mut size = None;
        for field in header.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(|| bad("bad header field"))?;
            match key {
                "mode" => mode = MaskMode::parse(value),
                "L" => segment_len = value.parse().ok(),
                "size" => size = value.parse::<usize>().ok(),
                _ => return Err(bad("unknown header field")),
            }
        }
        let (mode, segment_len, size) = match (mode, segment_len, size) {
            (Some(m), Some(l), Some(s)) => (m, l, s),
            _ => return Err(bad("incomplete header")),
        };
        let mut bits = Vec::with_capacity(size * size);
        for _ in 0..size {
            let line = lines.next().ok_or_else(|| bad("missing row"))?;
            let before = bits.len();
            for run in line.split_whitespace() {
                let (flag, count) = run.split_at(1);
                let value = match flag {
                    "T" => true,
                    "F" => false,
                    _ => return Err(bad("bad run flag")),
                };
                let count: usize = count.parse().map_err(|_| bad("bad run length"))?;
                bits.extend(core::iter::repeat_n(value, count));
            }
            if bits.len() - before != size {
                return Err(bad("row length does not match size"));
            }
        }
        if lines.next().is_some() {
            return Err(bad("trailing rows"));
        }
        Ok(AttentionMask { mode, segment_len, size, bits })
    }
}

pub fn build_attention_mask(mode: MaskMode, segment_len: usize) -> AttentionMask {
    let l = segment_len;
    let size = mode.sequence_len(l);
    let mut mask = AttentionMask::causal(size);
    mask.mode = mode;
    mask.segment_len = l;
    if mode == MaskMode::PackedJoint {
        let branch2 = 3 * l + 2;
        for q in branch2..size {
            for k in l + 1..branch2 {
                mask.bits[q * size + k] = false;
            }
        }
    }
    mask
}

/// Next-token supervision pairs for a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossTargets {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

pub fn loss_targets(layout: &SampleLayout) -> LossTargets {
    let n = layout.ids.len();
    LossTargets {
        inputs: layout.ids[..n - 1].to_vec(),
        targets: layout.ids[1..].to_vec(),
        mask: layout.loss_mask[1..].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(8, 8)
    }

    fn grid(ix: &[u32], m: Modality) -> TokenGrid {
        TokenGrid::new(1, ix.len(), ix.to_vec(), m).unwrap()
    }

    #[test]
    fn vocabulary_layout() {
        let v = vocab();
        assert_eq!(v.size(), 19);
        assert_eq!(v.to_global(Modality::Camera, 3), 11);
        assert_eq!(v.bos(), 16);
        assert_eq!((v.task_pose_first(), v.task_cam_first()), (17, 18));
        assert_eq!(v.classify(5), Some(TokenKind::Image(5)));
        assert_eq!(v.classify(11), Some(TokenKind::Camera(3)));
        assert_eq!(v.classify(18), Some(TokenKind::Task(Ordering::CamThenImg)));
        assert_eq!(v.classify(19), None);
    }

    #[test]
    fn cam_then_img_example() {
        let v = vocab();
        let s = build_sequence(
            &v,
            &grid(&[1, 2], Modality::Image),
            &grid(&[5, 6], Modality::Image),
            &grid(&[3, 4], Modality::Camera),
            Ordering::CamThenImg,
        )
        .unwrap();
        assert_eq!(s.ids, vec![v.bos(), 1, 2, v.task_cam_first(), 11, 12, 5, 6]);
        assert_eq!(s.loss_mask, vec![false, false, false, false, true, true, true, true]);

        let p = parse_sequence(&s.ids, &v, (1, 2)).unwrap();
        assert_eq!(p.observation.indices, vec![1, 2]);
        assert_eq!(p.camera().indices, vec![3, 4]);
        assert_eq!(p.image().indices, vec![5, 6]);
        assert_eq!(p.ordering, Ordering::CamThenImg);

        let t = loss_targets(&s);
        assert_eq!(t.inputs.len(), 7);
        assert_eq!(t.mask.iter().filter(|&&m| m).count(), 4);
    }

    #[test]
    fn img_then_cam_order() {
        let v = vocab();
        let s = build_sequence(
            &v,
            &grid(&[1, 2], Modality::Image),
            &grid(&[5, 6], Modality::Image),
            &grid(&[3, 4], Modality::Camera),
            Ordering::ImgThenCam,
        )
        .unwrap();
        assert_eq!(s.ids, vec![v.bos(), 1, 2, v.task_pose_first(), 5, 6, 11, 12]);
        for (p, &id) in s.ids.iter().enumerate() {
            assert!(allowed_range(&v, Ordering::ImgThenCam, 2, p).contains(&id), "position {p}");
        }
    }

    #[test]
    fn image_id_in_camera_segment_is_rejected() {
        let v = vocab();
        let ids = [v.bos(), 1, 2, v.task_cam_first(), 5, 12, 5, 6];
        assert!(matches!(
            parse_sequence(&ids, &v, (1, 2)),
            Err(SequenceError::ModalityViolation { position: 4, id: 5, .. })
        ));
        let ids = [v.bos(), 1, 2, 3, 5, 12, 5, 6];
        assert!(matches!(parse_sequence(&ids, &v, (1, 2)), Err(SequenceError::MalformedLayout(_))));
    }

    #[test]
    fn grid_mismatch() {
        let v = vocab();
        let r = build_sequence(
            &v,
            &grid(&[1, 2], Modality::Image),
            &grid(&[5, 6, 7], Modality::Image),
            &grid(&[3, 4], Modality::Camera),
            Ordering::CamThenImg,
        );
        assert!(matches!(r, Err(SequenceError::GridMismatch(_))));
        let r = build_sequence(
            &v,
            &grid(&[1, 2], Modality::Image),
            &grid(&[5, 6], Modality::Image),
            &grid(&[3, 9], Modality::Camera),
            Ordering::CamThenImg,
        );
        assert!(matches!(r, Err(SequenceError::ModalityViolation { .. })));
    }

    #[test]
    fn causal_mask_count() {
        let m = AttentionMask::causal(5);
        assert_eq!(m.count_true(), 15);
        let m = build_attention_mask(MaskMode::OrderedCausal, 1);
        assert_eq!(m.size(), 5);
        assert_eq!(m.count_true(), 15);
    }

    #[test]
    fn packed_mask_second_branch_row() {
        let m = build_attention_mask(MaskMode::PackedJoint, 1);
        assert_eq!(m.size(), 8);
        let visible: Vec<usize> = (0..8).filter(|&k| m.allows(6, k)).collect();
        assert_eq!(visible, vec![0, 1, 5, 6]);
    }

    #[test]
    fn every_mode_is_causal_with_diagonal() {
        for mode in [MaskMode::OrderedCausal, MaskMode::PackedJoint, MaskMode::Alternating] {
            for l in 1..5 {
                let m = build_attention_mask(mode, l);
                for q in 0..m.size() {
                    assert!(m.allows(q, q));
                    for k in q + 1..m.size() {
                        assert!(!m.allows(q, k));
                    }
                }
            }
        }
    }

    #[test]
    fn ordered_mask_is_packed_restricted_to_a_branch() {
        let l = 3;
        let packed = build_attention_mask(MaskMode::PackedJoint, l);
        let ordered = build_attention_mask(MaskMode::OrderedCausal, l);
        let branch2: Vec<usize> = (0..=l).chain(3 * l + 2..5 * l + 3).collect();
        let branch1: Vec<usize> = (0..3 * l + 2).collect();
        for positions in [branch1, branch2] {
            for (qi, &q) in positions.iter().enumerate() {
                for (ki, &k) in positions.iter().enumerate() {
                    assert_eq!(packed.allows(q, k), ordered.allows(qi, ki));
                }
            }
        }
    }

    #[test]
    fn rle_round_trip() {
        let m = build_attention_mask(MaskMode::PackedJoint, 2);
        let text = m.to_rle();
        assert!(text.starts_with("mode=PACKED_JOINT L=2 size=13\n"));
        assert_eq!(AttentionMask::from_rle(&text).unwrap(), m);
        assert!(AttentionMask::from_rle("mode=PACKED_JOINT L=1 size=2\nT1\nT2\n").is_err());
    }

    #[test]
    fn packed_sequence_layout() {
        let v = vocab();
        let s = build_packed_sequence(
            &v,
            &grid(&[1], Modality::Image),
            &grid(&[5], Modality::Image),
            &grid(&[3], Modality::Camera),
        )
        .unwrap();
        assert_eq!(s.ids, vec![v.bos(), 1, v.task_cam_first(), 11, 5, v.task_pose_first(), 5, 11]);
        assert_eq!(s.loss_mask, vec![false, false, false, true, true, false, true, true]);
        assert_eq!(s.tags[5], PositionTag::Scalar(2));
    }

    #[test]
    fn second_only_loss() {
        let v = vocab();
        let s = build_sequence(
            &v,
            &grid(&[1, 2], Modality::Image),
            &grid(&[5, 6], Modality::Image),
            &grid(&[3, 4], Modality::Camera),
            Ordering::ImgThenCam,
        )
        .unwrap()
        .with_loss_on_second_only();
        assert_eq!(s.loss_mask, vec![false, false, false, false, false, false, true, true]);
    }

    #[test]
    fn scalar_tags_sit_outside_grid() {
        let tags = ordered_tags(Ordering::CamThenImg, 2, 3);
        assert_eq!(tags.len(), 3 * 6 + 2);
        assert_eq!(tags[0].rope_coords(2, 3), (2, 3));
        assert_eq!(tags[7].rope_coords(2, 3), (3, 4));
        assert_eq!(tags[8], PositionTag::Grid { row: 0, col: 0, segment: Segment::TargetCamera });
        for t in &tags {
            if let PositionTag::Grid { row, col, .. } = t {
                assert!(*row < 2 && *col < 3);
            }
        }
    }
}
