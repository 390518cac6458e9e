use crate::detector::{DetectorState, FeatureMap, HeadLayout, Prediction, OUTPUTS_PER_ANCHOR};
use crate::geometry::RegDelta;
use crate::scalar::Real;

/// Zero-padded `kernel x kernel` neighborhoods of every cell, flattened as
/// `[cell][dy][dx][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches<T> {
    pub cells: usize,
    pub inputs: usize,
    pub data: Vec<T>,
}

impl<T: Real> Patches<T> {
    pub fn from_features(f: &FeatureMap<T>, kernel: usize) -> Self {
        let inputs = kernel * kernel * f.channels;
        let cells = f.height * f.width;
        let mut data = vec![T::zero(); cells * inputs];
        let r = (kernel / 2) as isize;
        for row in 0..f.height {
            for col in 0..f.width {
                let base = (row * f.width + col) * inputs;
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (rr, cc) = (row as isize + dy, col as isize + dx);
                        if rr >= 0 && cc >= 0 && (rr as usize) < f.height && (cc as usize) < f.width {
                            let src = f.cell(rr as usize * f.width + cc as usize);
                            data[base + k..base + k + f.channels].copy_from_slice(src);
                        }
                        k += f.channels;
                    }
                }
            }
        }
        Patches { cells, inputs, data }
    }

    #[inline]
    pub fn row(&self, cell: usize) -> &[T] {
        &self.data[cell * self.inputs..(cell + 1) * self.inputs]
    }
}

/// Shared-weight affine map from each cell's neighborhood to its anchors'
/// outputs.
pub fn detect_head<T: Real>(patches: &Patches<T>, state: &DetectorState<T>) -> Prediction<T> {
    let layout = state.layout;
    assert_eq!(patches.inputs, layout.inputs(), "patch size does not match head layout");
    let a_per = layout.anchors_per_cell;
    let n_out = layout.outputs();
    let (weights, bias) = state.params.split_at(layout.bias_offset());
    let mut pred = Prediction::zeros(patches.cells * a_per);
    let mut out = vec![T::zero(); n_out];
    for cell in 0..patches.cells {
        let x = patches.row(cell);
        for (o, v) in out.iter_mut().enumerate() {
            let w = &weights[o * layout.inputs()..(o + 1) * layout.inputs()];
            let mut acc = bias[o];
            for (wi, xi) in w.iter().zip(x) {
                acc += *wi * *xi;
            }
            *v = acc;
        }
        for a in 0..a_per {
            let o = &out[a * OUTPUTS_PER_ANCHOR..(a + 1) * OUTPUTS_PER_ANCHOR];
            let anchor = cell * a_per + a;
            pred.cls_logits[anchor] = o[0];
            pred.reg_deltas[anchor] = RegDelta::from_slice(&o[1..6]);
            pred.dir_logits[anchor] = [o[6], o[7]];
        }
    }
    pred
}

/// Parameter gradient given the gradient of the loss w.r.t. every output.
pub fn head_backward<T: Real>(patches: &Patches<T>, grad: &Prediction<T>, layout: HeadLayout) -> Vec<T> {
    let a_per = layout.anchors_per_cell;
    let n_in = layout.inputs();
    let mut g = vec![T::zero(); layout.num_params()];
    let bias_at = layout.bias_offset();
    let mut go = vec![T::zero(); layout.outputs()];
    for cell in 0..patches.cells {
        let mut any = false;
        for a in 0..a_per {
            let anchor = cell * a_per + a;
            let d = grad.reg_deltas[anchor].to_array();
            let o = &mut go[a * OUTPUTS_PER_ANCHOR..(a + 1) * OUTPUTS_PER_ANCHOR];
            o[0] = grad.cls_logits[anchor];
            o[1..6].copy_from_slice(&d);
            o[6] = grad.dir_logits[anchor][0];
            o[7] = grad.dir_logits[anchor][1];
            any |= o.iter().any(|v| *v != T::zero());
        }
        if !any {
            continue;
        }
        let x = patches.row(cell);
        for (o, &gv) in go.iter().enumerate() {
            if gv == T::zero() {
                continue;
            }
            g[bias_at + o] += gv;
            let row = &mut g[o * n_in..(o + 1) * n_in];
            for (gi, xi) in row.iter_mut().zip(x) {
                *gi += gv * *xi;
            }
        }
    }
    g
}
