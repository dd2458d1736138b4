//! Loss ops with fused, numerically stable forwards and exact backwards.

use std::sync::Arc;

use super::graph::{sigmoid, BackwardStep, GradStore, Graph, Tensor, TensorId};

/// sgn(z) * ln(1 + |z|), the symmetric log transform used for TSDF values.
pub fn log_transform(z: f64) -> f64 {
    z.signum() * (1.0 + z.abs()).ln()
}

impl Graph {
    /// Mean binary cross-entropy with logits:
    /// mean of max(o,0) - o*y + ln(1 + exp(-|o|)).
    pub fn bce_with_logits_mean(&mut self, logits: TensorId, targets: Arc<Vec<f64>>) -> TensorId {
        let t = self.value(logits);
        assert_eq!(t.numel(), targets.len(), "bce target length");
        let n = t.numel().max(1);
        let mut acc = 0.0;
        for (&o, &y) in t.data.iter().zip(targets.iter()) {
            acc += o.max(0.0) - o * y + (-o.abs()).exp().ln_1p();
        }
        let requires = self.requires_grad(logits);
        let step = requires.then(|| Box::new(BceStep { logits, targets: targets.clone(), n }) as Box<dyn BackwardStep>);
        self.push(Tensor::scalar(acc / n as f64), requires, step)
    }

    /// Depth-prior loss: mean |ln(sigma(o) + 1) - ln(2 - |t|)| with targets in
    /// [-1, 1]. Zero exactly when sigma(o) = 1 - |t| everywhere.
    pub fn prior_log_l1_mean(&mut self, logits: TensorId, targets: Arc<Vec<f64>>) -> TensorId {
        let t = self.value(logits);
        assert_eq!(t.numel(), targets.len(), "prior target length");
        let n = t.numel().max(1);
        let mut acc = 0.0;
        for (&o, &tv) in t.data.iter().zip(targets.iter()) {
            acc += ((sigmoid(o) + 1.0).ln() - (2.0 - tv.abs()).ln()).abs();
        }
        let requires = self.requires_grad(logits);
        let step = requires.then(|| Box::new(PriorStep { logits, targets: targets.clone(), n }) as Box<dyn BackwardStep>);
        self.push(Tensor::scalar(acc / n as f64), requires, step)
    }

    /// Log-transformed L1 TSDF loss over a supervision mask:
    /// mean over mask of |f(pred) - f(gt)| with f(z) = sgn(z) ln(1 + |z|).
    /// Returns the loss node and the supervised count (0 means the caller
    /// should warn; the loss is exactly 0 then).
    pub fn tsdf_log_l1_mean(
        &mut self,
        pred: TensorId,
        targets: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
    ) -> (TensorId, usize) {
        let t = self.value(pred);
        assert_eq!(t.numel(), targets.len(), "tsdf target length");
        assert_eq!(t.numel(), mask.len(), "tsdf mask length");
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return (self.constant(Tensor::scalar(0.0)), 0);
        }
        let mut acc = 0.0;
        for ((&x, &y), &m) in t.data.iter().zip(targets.iter()).zip(mask.iter()) {
            if m {
                acc += (log_transform(x) - log_transform(y)).abs();
            }
        }
        let requires = self.requires_grad(pred);
        let step = requires.then(|| {
            Box::new(TsdfStep { pred, targets: targets.clone(), mask: mask.clone(), count })
                as Box<dyn BackwardStep>
        });
        (self.push(Tensor::scalar(acc / count as f64), requires, step), count)
    }

    /// Soft dice loss of one mask row against a binary target:
    /// 1 - 2*sum(sigma(m) g) / (sum sigma(m) + sum g). In [0, 1].
    pub fn dice_loss(&mut self, logits: TensorId, target: Arc<Vec<f64>>) -> TensorId {
        let t = self.value(logits);
        assert_eq!(t.numel(), target.len(), "dice target length");
        let s: Vec<f64> = t.data.iter().map(|&o| sigmoid(o)).collect();
        let num: f64 = 2.0 * s.iter().zip(target.iter()).map(|(a, b)| a * b).sum::<f64>();
        let den: f64 = s.iter().sum::<f64>() + target.iter().sum::<f64>();
        if den == 0.0 {
            return self.constant(Tensor::scalar(0.0));
        }
        let requires = self.requires_grad(logits);
        let step = requires.then(|| Box::new(DiceStep { logits, target: target.clone(), num, den }) as Box<dyn BackwardStep>);
        self.push(Tensor::scalar(1.0 - num / den), requires, step)
    }

    /// Mean softmax cross-entropy of [K, C] logits against per-row class ids.
    pub fn softmax_ce_mean(&mut self, logits: TensorId, targets: Arc<Vec<u32>>) -> TensorId {
        let t = self.value(logits);
        let (k, c) = (t.rows(), t.cols());
        assert_eq!(k, targets.len(), "ce target length");
        let mut acc = 0.0;
        for (row, &tgt) in targets.iter().enumerate() {
            let xs = &t.data[row * c..(row + 1) * c];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + xs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            acc += lse - xs[tgt as usize];
        }
        let requires = self.requires_grad(logits);
        let step = requires.then(|| Box::new(CeStep { logits, targets: targets.clone(), k }) as Box<dyn BackwardStep>);
        self.push(Tensor::scalar(acc / k as f64), requires, step)
    }
}

struct BceStep {
    logits: TensorId,
    targets: Arc<Vec<f64>>,
    n: usize,
}

impl BackwardStep for BceStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.logits) {
            return;
        }
        let x = &values[self.logits.0].data;
        let scale = g[0] / self.n as f64;
        let slot = grads.slot(self.logits);
        for i in 0..x.len() {
            slot[i] += scale * (sigmoid(x[i]) - self.targets[i]);
        }
    }
}

struct PriorStep {
    logits: TensorId,
    targets: Arc<Vec<f64>>,
    n: usize,
}

impl BackwardStep for PriorStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.logits) {
            return;
        }
        let x = &values[self.logits.0].data;
        let scale = g[0] / self.n as f64;
        let slot = grads.slot(self.logits);
        for i in 0..x.len() {
            let s = sigmoid(x[i]);
            let d = (s + 1.0).ln() - (2.0 - self.targets[i].abs()).ln();
            // d|d|/do = sign(d) * s(1-s)/(s+1); subgradient 0 at d = 0.
            if d != 0.0 {
                slot[i] += scale * d.signum() * s * (1.0 - s) / (s + 1.0);
            }
        }
    }
}

struct TsdfStep {
    pred: TensorId,
    targets: Arc<Vec<f64>>,
    mask: Arc<Vec<bool>>,
    count: usize,
}

impl BackwardStep for TsdfStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.pred) {
            return;
        }
        let x = &values[self.pred.0].data;
        let scale = g[0] / self.count as f64;
        let slot = grads.slot(self.pred);
        for i in 0..x.len() {
            if !self.mask[i] {
                continue;
            }
            let d = log_transform(x[i]) - log_transform(self.targets[i]);
            if d != 0.0 {
                // d f(x)/dx = 1/(1+|x|) on both branches.
                slot[i] += scale * d.signum() / (1.0 + x[i].abs());
            }
        }
    }
}

struct DiceStep {
    logits: TensorId,
    target: Arc<Vec<f64>>,
    num: f64,
    den: f64,
}

impl BackwardStep for DiceStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.logits) {
            return;
        }
        let x = &values[self.logits.0].data;
        let slot = grads.slot(self.logits);
        for i in 0..x.len() {
            let s = sigmoid(x[i]);
            // d dice/ds = -(2 g_i den - num) / den^2
            let dd = -(2.0 * self.target[i] * self.den - self.num) / (self.den * self.den);
            slot[i] += g[0] * dd * s * (1.0 - s);
        }
    }
}

struct CeStep {
    logits: TensorId,
    targets: Arc<Vec<u32>>,
    k: usize,
}

impl BackwardStep for CeStep {
    fn backward(&self, values: &[Tensor], g: &[f64], grads: &mut GradStore) {
        if !grads.wants(self.logits) {
            return;
        }
        let t = &values[self.logits.0];
        let c = t.cols();
        let scale = g[0] / self.k as f64;
        let slot = grads.slot(self.logits);
        for (row, &tgt) in self.targets.iter().enumerate() {
            let xs = &t.data[row * c..(row + 1) * c];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = xs.iter().map(|v| (v - mx).exp()).sum();
            for i in 0..c {
                let p = (xs[i] - mx).exp() / sum;
                let onehot = if i == tgt as usize { 1.0 } else { 0.0 };
                slot[row * c + i] += scale * (p - onehot);
            }
        }
    }
}
