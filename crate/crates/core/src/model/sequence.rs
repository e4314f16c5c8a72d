use ndarray::Array2;

use super::ModelConfig;
use crate::answer::{self, Vocab};
use crate::error::{Error, Result};
use crate::supervision::GazeSupervision;
use crate::{Labels, NUM_GAZE_TOKENS};

/// One training / evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Grayscale pixels in `[0, 1]`, rows × columns.
    pub image: Array2<f64>,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub labels: Labels,
    pub supervision: Option<GazeSupervision>,
}

impl Sample {
    /// Default prompt and the fixed-format answer for `labels`.
    pub fn new(
        id: impl Into<String>,
        image: Array2<f64>,
        labels: Labels,
        supervision: Option<GazeSupervision>,
    ) -> Self {
        Self {
            id: id.into(),
            image,
            prompt: answer::default_prompt(),
            answer: answer::answer_tokens(&labels),
            labels,
            supervision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let head_ok = self.answer.len() == answer::answer_len()
            && self.answer[..NUM_GAZE_TOKENS] == Vocab::PLACEHOLDER
            && self.answer[NUM_GAZE_TOKENS] == Vocab::ANSWER;
        if !head_ok {
            return Err(Error::Validation(format!(
                "sample {}: answer must start with the four placeholders and `Answer:`",
                self.id
            )));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::Validation(format!("sample {}: labels must be 0/1", self.id)));
        }
        Ok(())
    }
}

/// Where everything sits in the concatenated visual + prompt + answer
/// sequence. Spans are half-open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub num_visual: usize,
    pub prompt_span: (usize, usize),
    pub answer_span: (usize, usize),
    /// Indices of the four gaze placeholders, contiguous at the answer start.
    pub gaze_positions: [usize; NUM_GAZE_TOKENS],
    /// Index of the `Answer:` token, the last answer token that does not
    /// depend on any yes/no value. The classifier reads this row.
    pub decision_index: usize,
    pub last_index: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.last_index + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Visual span `[0, P)`.
    pub fn visual_span(&self) -> (usize, usize) {
        (0, self.num_visual)
    }
}

/// Token ids for the full sequence (visual slots hold [`Vocab::IMAGE`]) and
/// the matching layout. Overflowing `max_seq_len` is an error.
pub fn build_sequence(sample: &Sample, config: &ModelConfig) -> Result<(Vec<u32>, SequenceLayout)> {
    sample.validate()?;
    let p = config.num_patches();
    let total = p + sample.prompt.len() + sample.answer.len();
    if total > config.max_seq_len {
        return Err(Error::Truncation {
            needed: total,
            max_t: config.max_seq_len,
        });
    }
    if let Some(&bad) = sample
        .prompt
        .iter()
        .chain(&sample.answer)
        .find(|&&t| t as usize >= config.vocab_size)
    {
        return Err(Error::Validation(format!("token id {bad} outside vocabulary")));
    }
    let mut tokens = vec![Vocab::IMAGE; p];
    tokens.extend_from_slice(&sample.prompt);
    let answer_start = tokens.len();
    tokens.extend_from_slice(&sample.answer);
    let layout = SequenceLayout {
        num_visual: p,
        prompt_span: (p, answer_start),
        answer_span: (answer_start, total),
        gaze_positions: std::array::from_fn(|i| answer_start + i),
        decision_index: answer_start + NUM_GAZE_TOKENS,
        last_index: total - 1,
    };
    Ok((tokens, layout))
}

/// Image as `P × patch_side²` rows of flattened patches, row-major over the
/// grid. Images larger than `grid_side · patch_side` are average-pooled down
/// when the side is an exact multiple.
pub fn image_patches(image: &Array2<f64>, config: &ModelConfig) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    let g = config.grid_side;
    let s = config.patch_side;
    if h != w || h % g != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not square with sides divisible by grid {g}"
        )));
    }
    let native = g * s;
    if h % native != 0 {
        return Err(Error::Config(format!(
            "image side {h} is not a multiple of grid_side * patch_side = {native}"
        )));
    }
    let pool = h / native;
    let inv = 1.0 / (pool * pool) as f64;
    let mut out = Array2::zeros((g * g, s * s));
    for row in 0..g {
        for col in 0..g {
            let mut patch = out.row_mut(row * g + col);
            for py in 0..s {
                for px in 0..s {
                    let mut acc = 0.0;
                    for dy in 0..pool {
                        for dx in 0..pool {
                            acc += image[[(row * s + py) * pool + dy, (col * s + px) * pool + dx]];
                        }
                    }
                    patch[py * s + px] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(labels: Labels) -> Sample {
        let cfg = ModelConfig::default();
        Sample::new("x", Array2::zeros((cfg.image_side(), cfg.image_side())), labels, None)
    }

    #[test]
    fn placeholders_are_contiguous() {
        let cfg = ModelConfig::default();
        let mut y = [0u8; 14];
        y[5] = 1;
        let (tokens, layout) = build_sequence(&sample(y), &cfg).unwrap();
        let p = layout.gaze_positions;
        assert_eq!(p[1], p[0] + 1);
        assert_eq!(p[2], p[1] + 1);
        assert_eq!(p[3], p[2] + 1);
        assert_eq!(p[0], layout.answer_span.0);
        assert_eq!(layout.len(), tokens.len());
        for (i, &pos) in p.iter().enumerate() {
            assert_eq!(tokens[pos], Vocab::PLACEHOLDER[i]);
        }
        assert_eq!(tokens[layout.decision_index], Vocab::ANSWER);
    }

    #[test]
    fn empty_prompt_places_gaze_after_visual() {
        let cfg = ModelConfig::default();
        let mut s = sample([0; 14]);
        s.prompt.clear();
        let (_, layout) = build_sequence(&s, &cfg).unwrap();
        assert_eq!(layout.gaze_positions[0], cfg.num_patches());
        assert_eq!(layout.prompt_span, (cfg.num_patches(), cfg.num_patches()));
    }

    #[test]
    fn answer_span_length_is_fixed() {
        let cfg = ModelConfig::default();
        let (_, a) = build_sequence(&sample([0; 14]), &cfg).unwrap();
        let (_, b) = build_sequence(&sample([1; 14]), &cfg).unwrap();
        assert_eq!(a.answer_span, b.answer_span);
        assert_eq!(a.answer_span.1 - a.answer_span.0, answer::answer_len());
    }

    #[test]
    fn overflow_is_an_error() {
        let cfg = ModelConfig {
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        assert!(matches!(
            build_sequence(&sample([0; 14]), &cfg),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn malformed_answer_rejected() {
        let cfg = ModelConfig::default();
        let mut s = sample([0; 14]);
        s.answer.swap(0, 1);
        assert!(build_sequence(&s, &cfg).is_err());
    }

    #[test]
    fn patch_extraction_and_pooling() {
        let cfg = ModelConfig {
            grid_side: 2,
            patch_side: 2,
            max_visual_tokens: 4,
            ..ModelConfig::default()
        };
        let img = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let p = image_patches(&img, &cfg).unwrap();
        assert_eq!(p.dim(), (4, 4));
        assert_eq!(p.row(1).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);

        let big = Array2::from_shape_fn((8, 8), |(r, c)| if (r / 2 + c / 2) % 2 == 0 { 1.0 } else { 0.0 });
        let pooled = image_patches(&big, &cfg).unwrap();
        assert_eq!(pooled.row(0).to_vec(), vec![1.0, 0.0, 0.0, 1.0]);

        assert!(image_patches(&Array2::zeros((6, 6)), &cfg).is_err());
        assert!(image_patches(&Array2::zeros((4, 8)), &cfg).is_err());
    }
}
