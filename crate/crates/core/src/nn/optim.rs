use crate::error::{Error, Result};

/// One SGD-with-momentum update, in place:
/// `velocity <- momentum * velocity + grads; params <- params - lr * velocity`.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::internal(format!(
            "sgd_step length mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_moves_by_lr_times_grad() {
        let mut p = vec![1.0f32, -2.0, 0.5];
        let g = [0.5f32, 1.0, -4.0];
        let mut v = vec![0.0; 3];
        sgd_step(&mut p, &g, &mut v, 0.01, 0.0).unwrap();
        for ((after, before), gi) in p.iter().zip([1.0f32, -2.0, 0.5]).zip(g) {
            assert_eq!(*after, before - 0.01 * gi);
        }
    }

    #[test]
    fn zero_grad_coasts_on_velocity() {
        let mut p = vec![1.0f32, 2.0];
        let mut v = vec![0.4f32, -0.2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.5).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * (0.5 * 0.4), 2.0 - 0.1 * (0.5 * -0.2)]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu) = (0.01f32, 0.5f32);
        let g1 = [0.3f32, -1.2, 2.5];
        let g2 = [-0.7f32, 0.1, 0.9];
        let p0 = [0.25f32, 1.5, -0.75];
        let mut p = p0.to_vec();
        let mut v = vec![0.0f32; 3];
        sgd_step(&mut p, &g1, &mut v, lr, mu).unwrap();
        sgd_step(&mut p, &g2, &mut v, lr, mu).unwrap();
        for i in 0..3 {
            let v1 = mu * 0.0 + g1[i];
            let p1 = p0[i] - lr * v1;
            let v2 = mu * v1 + g2[i];
            let p2 = p1 - lr * v2;
            assert_eq!(p[i].to_bits(), p2.to_bits());
            assert_eq!(v[i].to_bits(), v2.to_bits());
        }
    }

    #[test]
    fn length_mismatch_is_internal_error() {
        let mut p = vec![0.0; 3];
        let mut v = vec![0.0; 2];
        assert!(matches!(
            sgd_step(&mut p, &[0.0; 3], &mut v, 0.1, 0.0),
            Err(Error::Internal(_))
        ));
    }
}
