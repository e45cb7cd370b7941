//! Learnable parameter blocks and their initialization.

use rand::Rng;

use crate::tensor::Tensor;

/// Declares a struct of named parameter tensors together with a matching
/// struct of graph handles produced by `bind`.
macro_rules! parameter_block {
    (
        $(#[$meta:meta])*
        $name:ident / $vars:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $crate::tensor::Tensor,)*
        }

        /// Graph handles for each tensor of the matching parameter block.
        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $(pub $field: $crate::graph::Var,)*
        }

        impl $name {
            /// Registers every tensor as a gradient-receiving leaf.
            pub fn bind(&self, g: &mut $crate::graph::Graph) -> $vars {
                $vars { $($field: g.parameter(self.$field.clone()),)* }
            }

            pub fn named(&self) -> Vec<(&'static str, &$crate::tensor::Tensor)> {
                vec![$((stringify!($field), &self.$field),)*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut $crate::tensor::Tensor> {
                vec![$(&mut self.$field,)*]
            }
        }

        impl $vars {
            pub fn all(&self) -> Vec<$crate::graph::Var> {
                vec![$(self.$field,)*]
            }
        }
    };
}

pub(crate) use parameter_block;

/// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(shape, data).expect("shape and data length agree")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn uniform_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = uniform_init(&[20, 16], 16, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() < 0.25));
        assert!(t.data().iter().any(|v| v.abs() > 0.2));
    }
}
