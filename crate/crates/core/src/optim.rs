use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Adam over a fixed list of named parameters. Parameters without a gradient
/// in a given step are left untouched, moments included.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    params: Vec<(String, Var, Tensor, Tensor)>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, &'a Var)>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let params = params
            .into_iter()
            .map(|(name, var)| {
                let zeros = var.as_tensor().zeros_like()?;
                Ok((name.to_string(), var.clone(), zeros.clone(), zeros))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            params,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (_, var, m, v) in &mut self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry op history; keeping it would chain every step.
            let g = g.detach();
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, _, m, v) in &self.params {
            ckpt.push(format!("{prefix}.m.{name}"), m)?;
            ckpt.push(format!("{prefix}.v.{name}"), v)?;
        }
        Ok(())
    }

    pub fn read_from(&mut self, ckpt: &Checkpoint, prefix: &str, steps: u64) -> Result<()> {
        for (name, var, m, v) in &mut self.params {
            for (slot, kind) in [(&mut *m, "m"), (&mut *v, "v")] {
                let key = format!("{prefix}.{kind}.{name}");
                let stored = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
                if stored.shape != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has wrong shape")));
                }
                *slot = stored.to_tensor(var.device())?.to_dtype(var.dtype())?;
            }
        }
        self.t = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new([("x", &x)], 0.1, 0.9, 0.999).unwrap();
        for _ in 0..300 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first update exactly lr * sign(g).
        let x = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = Adam::new([("x", &x)], 0.01, 0.5, 0.999).unwrap();
        let loss = (x.as_tensor() * 5.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.99).abs() < 1e-8, "{v}");
    }
}
