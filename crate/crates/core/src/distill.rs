//! EMA teacher, soft labels and the consistency / final losses.

use serde::{Deserialize, Serialize};

use crate::encoder::{bce_loss, encode, sigmoid, EncoderConfig, ModelParams, SeqBatch};
use crate::error::{Error, Result};

/// Exponential moving average of the student's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParams {
    pub shadow: ModelParams,
    pub decay: f64,
}

impl TeacherParams {
    /// Starts the teacher as an exact copy of the student.
    pub fn from_student(student: &ModelParams, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("teacher decay {decay} outside [0, 1]")));
        }
        Ok(TeacherParams {
            shadow: student.clone(),
            decay,
        })
    }

    /// `ω′ ← d·ω′ + (1−d)·ω`, elementwise.
    pub fn ema_update(&mut self, student: &ModelParams) -> Result<()> {
        ema_update(&mut self.shadow, student, self.decay)
    }
}

pub fn ema_update(shadow: &mut ModelParams, student: &ModelParams, decay: f64) -> Result<()> {
    if !shadow.same_shapes(student) {
        return Err(Error::Logic("teacher and student shapes differ".into()));
    }
    let keep = 1.0 - decay;
    for (t, s) in shadow.params_mut().iter_mut().zip(student.params()) {
        for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = decay * *a + keep * b;
        }
    }
    Ok(())
}

/// Teacher probability for `item` after `prefix`, dropout off.
pub fn soft_label(teacher: &TeacherParams, cfg: &EncoderConfig, prefix: &[usize], item: usize) -> Result<f64> {
    let batch = SeqBatch::from_sequences(&[prefix], cfg.max_len);
    let reps = encode(&teacher.shadow, cfg, &batch)?;
    Ok(sigmoid(teacher.shadow.score(reps.last(0), item)?))
}

/// Sum of soft-label cross entropies; zero for empty input.
pub fn consistency_loss(student_logits: &[f64], soft_labels: &[f64]) -> f64 {
    assert_eq!(student_logits.len(), soft_labels.len());
    student_logits
        .iter()
        .zip(soft_labels)
        .map(|(&x, &y)| bce_loss(x, y))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub basic: f64,
    pub consistency: f64,
    pub alpha: f64,
    #[serde(rename = "final")]
    pub total: f64,
}

pub fn final_loss(basic: f64, consistency: f64, alpha: f64) -> LossBreakdown {
    debug_assert!(alpha >= 0.0);
    LossBreakdown {
        basic,
        consistency,
        alpha,
        total: basic + alpha * consistency,
    }
}
