/// Learning rate at the start of the first epoch of each cycle.
pub const BASE_LR: f64 = 2e-4;
/// Epochs between halvings.
pub const HALVING_EPOCHS: usize = 200;
/// Epochs after which the rate resets to its base value.
pub const CYCLE_EPOCHS: usize = 1000;

/// Step schedule: `base · 2^-floor((epoch mod 1000) / 200)`.
pub fn lr_at(epoch: usize, base: f64) -> f64 {
    let halvings = (epoch % CYCLE_EPOCHS) / HALVING_EPOCHS;
    base / (1u64 << halvings) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cases = [
            (0, 2e-4),
            (199, 2e-4),
            (200, 1e-4),
            (400, 5e-5),
            (600, 2.5e-5),
            (800, 1.25e-5),
            (999, 1.25e-5),
            (1000, 2e-4),
            (1200, 1e-4),
        ];
        for (epoch, lr) in cases {
            assert_eq!(lr_at(epoch, BASE_LR), lr, "epoch {epoch}");
        }
    }

    #[test]
    fn periodic_and_piecewise_constant() {
        for e in 0..3000 {
            assert_eq!(lr_at(e, BASE_LR), lr_at(e + CYCLE_EPOCHS, BASE_LR));
            assert_eq!(lr_at(e, BASE_LR), lr_at(e - e % HALVING_EPOCHS, BASE_LR));
        }
    }
}
