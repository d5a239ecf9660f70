use super::config::{ModelConfig, CONV_CHANNELS, LOCAL_VOCAB, RESIDUAL_VOCAB};

/// Positions of one transformer layer's tensors in the manifest.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub conv_w: Vec<usize>,
    pub conv_b: Vec<usize>,
    pub local: usize,
    pub residual: usize,
    pub pos: usize,
    pub layers: Vec<LayerIx>,
    pub final_g: usize,
    pub final_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

pub(crate) struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) fn build(cfg: &ModelConfig) -> (Vec<Entry>, Layout) {
    let mut entries = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        entries.push(Entry { name, shape, init });
        entries.len() - 1
    };
    let d = cfg.d;
    let mut conv_w = Vec::new();
    let mut conv_b = Vec::new();
    let mut cin = cfg.channels;
    for (i, &cout) in CONV_CHANNELS.iter().chain(std::iter::once(&d)).enumerate() {
        conv_w.push(add(format!("global.conv{i}.weight"), vec![cout, cin * 9], Init::Normal));
        conv_b.push(add(format!("global.conv{i}.bias"), vec![cout], Init::Zeros));
        cin = cout;
    }
    let local = add("local.embed".into(), vec![cfg.channels * LOCAL_VOCAB, d], Init::Normal);
    let residual = add("residual.embed".into(), vec![RESIDUAL_VOCAB, d], Init::Normal);
    let pos = add("pos.embed".into(), vec![cfg.position_slots(), d], Init::Normal);
    let mut layers = Vec::new();
    for l in 0..cfg.layers {
        let mut t = |n: &str, shape: Vec<usize>, init| add(format!("layer{l}.{n}"), shape, init);
        layers.push(LayerIx {
            ln1_g: t("ln1.gamma", vec![d], Init::Ones),
            ln1_b: t("ln1.beta", vec![d], Init::Zeros),
            wq: t("attn.wq", vec![d, d], Init::Normal),
            bq: t("attn.bq", vec![d], Init::Zeros),
            wk: t("attn.wk", vec![d, d], Init::Normal),
            bk: t("attn.bk", vec![d], Init::Zeros),
            wv: t("attn.wv", vec![d, d], Init::Normal),
            bv: t("attn.bv", vec![d], Init::Zeros),
            wo: t("attn.wo", vec![d, d], Init::Normal),
            bo: t("attn.bo", vec![d], Init::Zeros),
            ln2_g: t("ln2.gamma", vec![d], Init::Ones),
            ln2_b: t("ln2.beta", vec![d], Init::Zeros),
            w1: t("mlp.w1", vec![d, 4 * d], Init::Normal),
            b1: t("mlp.b1", vec![4 * d], Init::Zeros),
            w2: t("mlp.w2", vec![4 * d, d], Init::Normal),
            b2: t("mlp.b2", vec![d], Init::Zeros),
        });
    }
    let final_g = add("final.ln.gamma".into(), vec![d], Init::Ones);
    let final_b = add("final.ln.beta".into(), vec![d], Init::Zeros);
    let head_w = add("head.weight".into(), vec![d, 3 * cfg.mixtures], Init::Normal);
    let head_b = add("head.bias".into(), vec![3 * cfg.mixtures], Init::Zeros);
    let layout = Layout {
        conv_w,
        conv_b,
        local,
        residual,
        pos,
        layers,
        final_g,
        final_b,
        head_w,
        head_b,
    };
    (entries, layout)
}

/// Parameter names and shapes, in storage order.
pub fn manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    build(cfg).0.into_iter().map(|e| (e.name, e.shape)).collect()
}
