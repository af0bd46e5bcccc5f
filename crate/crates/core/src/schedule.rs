//! Linear warmup followed by cosine decay, evaluated at fractional epochs.

/// Learning rate at `epoch_frac ∈ [0, epochs]`: a linear ramp from 0 to
/// `base_lr` over the warmup, then `base_lr · ½(1 + cos(π·(t−w)/(E−w)))`.
/// Values outside the range are clamped.
pub fn lr_at(epoch_frac: f64, base_lr: f64, warmup_epochs: f64, epochs: f64) -> f64 {
    let t = epoch_frac.clamp(0.0, epochs);
    if t < warmup_epochs {
        return base_lr * (t / warmup_epochs);
    }
    let span = epochs - warmup_epochs;
    if span <= 0.0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * (t - warmup_epochs) / span).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_warmup_starts_at_base() {
        assert_eq!(lr_at(0.0, 0.1, 0.0, 10.0), 0.1);
        assert!(lr_at(5.0, 0.1, 0.0, 10.0) - 0.05 < 1e-15);
    }
}
