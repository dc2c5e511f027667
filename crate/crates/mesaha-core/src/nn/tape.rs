//! Graph recording and the reverse gradient sweep.

use super::ops::{self, BnCache};
use super::{Elem, ParamId, Params};
use ndarray::{s, Array1, Array4, ArrayD, Axis, Ix1, Ix4, Zip};

/// How normalization layers behave while a graph is being recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics; batch means/variances are exposed on
    /// the tape so the trainer can fold them into the running buffers.
    Train,
    /// Normalize with the stored running statistics.
    Inference,
    /// Skip statistics entirely: `y = gamma * x + beta`. The well-defined
    /// setting for analytic tests.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<E: Elem> {
    Input,
    Conv {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        idx: Array4<u8>,
    },
    Upsample {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// `a[n,c,..] * h[n,0,..]` with the single-channel map broadcast over
    /// `a`'s channels.
    MulBroadcast {
        a: NodeId,
        h: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        x: NodeId,
        p: ParamId,
    },
    Norm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        mode: NormMode,
        cache: Option<BnCache<E>>,
        run_mean: ParamId,
        run_var: ParamId,
    },
}

struct Node<E: Elem> {
    value: Array4<E>,
    op: Op<E>,
}

/// Batch statistics observed by one normalization layer during a training
/// forward pass; the trainer folds these into the running buffers.
pub struct StatUpdate<E> {
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub mean: Array1<E>,
    pub var: Array1<E>,
}

/// Gradients keyed by parameter id, produced by [`Tape::backward`].
pub struct GradStore<E> {
    slots: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> GradStore<E> {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<E>> {
        self.slots[id.0].as_ref()
    }
}

pub struct Tape<E: Elem> {
    mode: NormMode,
    bn_eps: f64,
    nodes: Vec<Node<E>>,
    stat_updates: Vec<StatUpdate<E>>,
}

impl<E: Elem> Tape<E> {
    pub fn new(mode: NormMode) -> Self {
        Tape {
            mode,
            bn_eps: 1e-5,
            nodes: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &Array4<E> {
        &self.nodes[id.0].value
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<E>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Array4<E>, op: Op<E>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array4<E>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn conv(
        &mut self,
        params: &Params<E>,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    ) -> NodeId {
        let wv = params
            .get(w)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv kernel is 4-d");
        let value = match b {
            Some(bid) => {
                let bv = params
                    .get(bid)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("conv bias is 1-d");
                ops::conv2d_forward(&self.value(x).view(), &wv, Some(&bv))
            }
            None => ops::conv2d_forward(&self.value(x).view(), &wv, None),
        };
        self.push(value, Op::Conv { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.max(E::zero()));
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self
            .value(x)
            .mapv(|v| E::one() / (E::one() + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }

    pub fn maxpool(&mut self, x: NodeId) -> NodeId {
        let (value, idx) = ops::maxpool2_forward(&self.value(x).view());
        self.push(value, Op::MaxPool { x, idx })
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let value = ops::upsample2_forward(&self.value(x).view());
        self.push(value, Op::Upsample { x })
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|id| self.value(*id).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("aligned concat inputs");
        self.push(value, Op::Concat { xs: xs.to_vec() })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul { a, b })
    }

    pub fn mul_broadcast(&mut self, a: NodeId, h: NodeId) -> NodeId {
        let av = self.value(a);
        let hv = self.value(h);
        assert_eq!(hv.dim().1, 1, "broadcast factor must have one channel");
        let mut value = av.clone();
        let c = value.dim().1;
        for ch in 0..c {
            let mut lane = value.slice_mut(s![.., ch, .., ..]);
            let hl = hv.index_axis(Axis(1), 0);
            Zip::from(&mut lane).and(&hl).for_each(|o, hvv| *o = *o * *hvv);
        }
        self.push(value, Op::MulBroadcast { a, h })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add { a, b })
    }

    pub fn add_scalar(&mut self, params: &Params<E>, x: NodeId, p: ParamId) -> NodeId {
        let c = params.get(p)[[0]];
        let value = self.value(x).mapv(|v| v + c);
        self.push(value, Op::AddScalar { x, p })
    }

    pub fn norm(
        &mut self,
        params: &Params<E>,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        run_mean: ParamId,
        run_var: ParamId,
    ) -> NodeId {
        let mode = self.mode;
        let g = params
            .get(gamma)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gamma is 1-d");
        let b = params
            .get(beta)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("beta is 1-d");
        let (value, cache) = match mode {
            NormMode::Train => {
                let (v, cache) = ops::bn_forward_train(&self.value(x).view(), &g, &b, self.bn_eps);
                self.stat_updates.push(StatUpdate {
                    run_mean,
                    run_var,
                    mean: cache.mean.clone(),
                    var: cache.var.clone(),
                });
                (v, Some(cache))
            }
            NormMode::Inference => {
                let rm = params
                    .get(run_mean)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("running mean is 1-d");
                let rv = params
                    .get(run_var)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("running var is 1-d");
                let eps = E::from_f64(self.bn_eps);
                let scale =
                    Array1::from_shape_fn(g.len(), |i| g[i] / (rv[i] + eps).sqrt());
                let shift =
                    Array1::from_shape_fn(g.len(), |i| b[i] - rm[i] * scale[i]);
                (
                    ops::bn_forward_affine(&self.value(x).view(), &scale, &shift),
                    None,
                )
            }
            NormMode::Degenerate => {
                let scale = g.to_owned();
                let shift = b.to_owned();
                (
                    ops::bn_forward_affine(&self.value(x).view(), &scale, &shift),
                    None,
                )
            }
        };
        self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                mode,
                cache,
                run_mean,
                run_var,
            },
        )
    }

    /// Reverse sweep. `seeds` are dLoss/dNode for the graph outputs; returns
    /// dLoss/dParam for every parameter reached by the sweep.
    pub fn backward(&self, params: &Params<E>, seeds: Vec<(NodeId, Array4<E>)>) -> GradStore<E> {
        let mut node_grads: Vec<Option<Array4<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(
                g.dim(),
                self.nodes[id.0].value.dim(),
                "seed gradient shape mismatch"
            );
            accumulate4(&mut node_grads[id.0], g);
        }
        let mut pgrads: Vec<Option<ArrayD<E>>> = (0..params.len()).map(|_| None).collect();

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Conv { x, w, b } => {
                    let wv = params
                        .get(*w)
                        .view()
                        .into_dimensionality::<Ix4>()
                        .expect("conv kernel is 4-d");
                    let (dx, dw, db) =
                        ops::conv2d_backward(&self.nodes[x.0].value.view(), &wv, &g.view());
                    accumulate4(&mut node_grads[x.0], dx);
                    accumulate_dyn(&mut pgrads[w.0], dw.into_dyn());
                    if let Some(bid) = b {
                        accumulate_dyn(&mut pgrads[bid.0], db.into_dyn());
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g;
                    Zip::from(&mut dx).and(xv).for_each(|d, xvv| {
                        if *xvv <= E::zero() {
                            *d = E::zero();
                        }
                    });
                    accumulate4(&mut node_grads[x.0], dx);
                }
                Op::Sigmoid { x } => {
                    let yv = &self.nodes[i].value;
                    let mut dx = g;
                    Zip::from(&mut dx).and(yv).for_each(|d, y| {
                        *d = *d * *y * (E::one() - *y);
                    });
                    accumulate4(&mut node_grads[x.0], dx);
                }
                Op::MaxPool { x, idx } => {
                    let dx = ops::maxpool2_backward(&g.view(), idx);
                    accumulate4(&mut node_grads[x.0], dx);
                }
                Op::Upsample { x } => {
                    let dx = ops::upsample2_backward(&g.view());
                    accumulate4(&mut node_grads[x.0], dx);
                }
                Op::Concat { xs } => {
                    let mut offset = 0usize;
                    for xid in xs {
                        let c = self.nodes[xid.0].value.dim().1;
                        let part = g.slice(s![.., offset..offset + c, .., ..]).to_owned();
                        accumulate4(&mut node_grads[xid.0], part);
                        offset += c;
                    }
                }
                Op::Mul { a, b } => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    accumulate4(&mut node_grads[a.0], da);
                    accumulate4(&mut node_grads[b.0], db);
                }
                Op::MulBroadcast { a, h } => {
                    let av = &self.nodes[a.0].value;
                    let hv = &self.nodes[h.0].value;
                    let (n, c, hh, ww) = av.dim();
                    let mut da = Array4::<E>::zeros((n, c, hh, ww));
                    let mut dh = Array4::<E>::zeros((n, 1, hh, ww));
                    for ch in 0..c {
                        let gl = g.slice(s![.., ch, .., ..]);
                        let al = av.slice(s![.., ch, .., ..]);
                        let hl = hv.slice(s![.., 0, .., ..]);
                        let mut dal = da.slice_mut(s![.., ch, .., ..]);
                        Zip::from(&mut dal).and(&gl).and(&hl).for_each(|o, gv, hvv| {
                            *o = *gv * *hvv;
                        });
                        let mut dhl = dh.slice_mut(s![.., 0, .., ..]);
                        Zip::from(&mut dhl).and(&gl).and(&al).for_each(|o, gv, avv| {
                            *o += *gv * *avv;
                        });
                    }
                    accumulate4(&mut node_grads[a.0], da);
                    accumulate4(&mut node_grads[h.0], dh);
                }
                Op::Add { a, b } => {
                    accumulate4(&mut node_grads[a.0], g.clone());
                    accumulate4(&mut node_grads[b.0], g);
                }
                Op::AddScalar { x, p } => {
                    let total = g.sum();
                    accumulate_dyn(&mut pgrads[p.0], ndarray::arr1(&[total]).into_dyn());
                    accumulate4(&mut node_grads[x.0], g);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    mode,
                    cache,
                    run_mean,
                    run_var,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = params
                        .get(*gamma)
                        .view()
                        .into_dimensionality::<Ix1>()
                        .expect("gamma is 1-d");
                    let (dx, dgamma, dbeta) = match mode {
                        NormMode::Train => {
                            let cache = cache.as_ref().expect("train mode caches stats");
                            ops::bn_backward_train(&xv.view(), &gv, cache, &g.view())
                        }
                        NormMode::Degenerate | NormMode::Inference => {
                            // Affine with fixed statistics: in degenerate mode
                            // scale = gamma, in inference scale = gamma*invstd
                            // with constant buffers.
                            let c = gv.len();
                            let eps = E::from_f64(self.bn_eps);
                            let (scale, center): (Array1<E>, Array1<E>) = match mode {
                                NormMode::Degenerate => {
                                    (Array1::from_elem(c, E::one()), Array1::zeros(c))
                                }
                                _ => {
                                    let rm = params
                                        .get(*run_mean)
                                        .view()
                                        .into_dimensionality::<Ix1>()
                                        .expect("running mean is 1-d");
                                    let rv = params
                                        .get(*run_var)
                                        .view()
                                        .into_dimensionality::<Ix1>()
                                        .expect("running var is 1-d");
                                    (
                                        Array1::from_shape_fn(c, |i| {
                                            E::one() / (rv[i] + eps).sqrt()
                                        }),
                                        rm.to_owned(),
                                    )
                                }
                            };
                            let mut dx = Array4::<E>::zeros(xv.raw_dim());
                            let mut dgamma = Array1::<E>::zeros(c);
                            let mut dbeta = Array1::<E>::zeros(c);
                            for ch in 0..c {
                                let gl = g.slice(s![.., ch, .., ..]);
                                let xl = xv.slice(s![.., ch, .., ..]);
                                let k = gv[ch] * scale[ch];
                                let mut dxl = dx.slice_mut(s![.., ch, .., ..]);
                                Zip::from(&mut dxl).and(&gl).for_each(|o, gvv| *o = *gvv * k);
                                let mut sum_dy = E::zero();
                                let mut sum_dy_xhat = E::zero();
                                Zip::from(&gl).and(&xl).for_each(|gvv, xvv| {
                                    sum_dy += *gvv;
                                    sum_dy_xhat += *gvv * (*xvv - center[ch]) * scale[ch];
                                });
                                dgamma[ch] = sum_dy_xhat;
                                dbeta[ch] = sum_dy;
                            }
                            (dx, dgamma, dbeta)
                        }
                    };
                    accumulate4(&mut node_grads[x.0], dx);
                    accumulate_dyn(&mut pgrads[gamma.0], dgamma.into_dyn());
                    accumulate_dyn(&mut pgrads[beta.0], dbeta.into_dyn());
                }
            }
        }
        GradStore { slots: pgrads }
    }
}

fn accumulate4<E: Elem>(slot: &mut Option<Array4<E>>, g: Array4<E>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => *acc += &g,
    }
}

fn accumulate_dyn<E: Elem>(slot: &mut Option<ArrayD<E>>, g: ArrayD<E>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => *acc += &g,
    }
}
