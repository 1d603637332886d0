use super::Tensor;
use crate::rng::Rng;

/// Fan-in / fan-out of a weight tensor, used for Xavier scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fan {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Fan {
    /// `[out, in, kh, kw]` convolution kernel or `[out, in]` linear weight.
    pub fn of_weight(shape: &[usize]) -> Fan {
        let receptive: usize = shape.iter().skip(2).product();
        let (out, inp) = match shape {
            [o, i, ..] => (*o, *i),
            [n] => (*n, *n),
            _ => (1, 1),
        };
        Fan { fan_in: inp * receptive, fan_out: out * receptive }
    }
}

/// Xavier/Glorot uniform initialization: `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    let fan = Fan::of_weight(shape);
    let bound = (6.0 / (fan.fan_in + fan.fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-bound, bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_fan() {
        let f = Fan::of_weight(&[16, 8, 3, 3]);
        assert_eq!(f, Fan { fan_in: 72, fan_out: 144 });
    }

    #[test]
    fn xavier_is_bounded_and_seeded() {
        let shape = [4, 3, 3, 3];
        let a = xavier_uniform(&shape, &mut Rng::new(5));
        let b = xavier_uniform(&shape, &mut Rng::new(5));
        assert_eq!(a, b);
        let bound = (6.0f64 / (27.0 + 36.0)).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
