mod common;

use common::{attention, layer_norm, matmul, max_diff, normal, rng, rows};
use spectra_core::nn::{AttentionConfig, AttentionLayer, EntityEmbeddings, GruCell, Linear};
use spectra_core::{Array, Error, Graph, ParamStore};

struct Fixture {
    store: ParamStore,
    layer: AttentionLayer,
    entities: Array,
    visible: Vec<bool>,
    groups: usize,
    slots: usize,
}

fn fixture(groups: usize, slots: usize, hidden: usize, heads: usize, seed: u64) -> Fixture {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(hidden, heads).unwrap();
    let layer = AttentionLayer::new(&mut store, "att", cfg, &mut r);
    // Non-trivial layer-norm parameters so the oracle checks them.
    *store.get_mut(layer.ln_gain) = normal(1, hidden, &mut r);
    *store.get_mut(layer.ln_bias) = normal(1, hidden, &mut r);
    let entities = normal(groups * slots, hidden, &mut r);
    let visible = (0..groups * slots)
        .map(|i| i % slots == 0 || (i * 7 + 3) % 4 != 0)
        .collect();
    Fixture {
        store,
        layer,
        entities,
        visible,
        groups,
        slots,
    }
}

fn embeddings(g: &mut Graph, f: &Fixture) -> EntityEmbeddings {
    let own: Vec<f64> = (0..f.groups)
        .flat_map(|gi| f.entities.row_slice(gi * f.slots).to_vec())
        .collect();
    let hidden = f.entities.cols();
    EntityEmbeddings {
        own: g.input(Array::matrix(f.groups, hidden, own).unwrap()),
        all: g.input(f.entities.clone()),
        groups: f.groups,
        slots: f.slots,
        visible: f.visible.clone(),
    }
}

fn project(x: &[Vec<f64>], w: &Array) -> Vec<Vec<f64>> {
    matmul(x, &rows(w))
}

#[test]
fn saqa_matches_naive_single_query_attention() {
    let f = fixture(3, 5, 8, 2, 11);
    let mut g = Graph::new();
    let emb = embeddings(&mut g, &f);
    let out = f.layer.saqa(&mut g, &f.store, &emb).unwrap();
    let ctx = rows(g.value(out.context));
    let gain = f.store.get(f.layer.ln_gain).data();
    let bias = f.store.get(f.layer.ln_bias).data();
    for gi in 0..f.groups {
        let ents: Vec<Vec<f64>> = (0..f.slots)
            .map(|j| f.entities.row_slice(gi * f.slots + j).to_vec())
            .collect();
        let q = project(&ents[..1], f.store.get(f.layer.w_query));
        let k = project(&ents, f.store.get(f.layer.w_key));
        let v = project(&ents, f.store.get(f.layer.w_value));
        let vis = &f.visible[gi * f.slots..(gi + 1) * f.slots];
        let (att, weights) = attention(&q, &k, &v, vis, 2);
        let res: Vec<f64> = ents[0].iter().zip(&att[0]).map(|(a, b)| a + b).collect();
        let want = layer_norm(&res, gain, bias);
        assert!(max_diff(&[ctx[gi].clone()], &[want]) < 1e-10, "group {gi}");
        for h in 0..2 {
            let got = g.value(out.weights).row_slice(gi * 2 + h);
            assert!(max_diff(&[got.to_vec()], &[weights[0][h].clone()]) < 1e-12);
            for (j, vis) in vis.iter().enumerate() {
                if !vis {
                    assert_eq!(got[j], 0.0);
                }
            }
        }
    }
}

#[test]
fn self_attention_matches_naive_all_pairs() {
    let f = fixture(2, 4, 6, 3, 12);
    let mut g = Graph::new();
    let emb = embeddings(&mut g, &f);
    let out = f.layer.self_attention(&mut g, &f.store, &emb).unwrap();
    let got = rows(g.value(out.rows));
    let gain = f.store.get(f.layer.ln_gain).data();
    let bias = f.store.get(f.layer.ln_bias).data();
    for gi in 0..f.groups {
        let ents: Vec<Vec<f64>> = (0..f.slots)
            .map(|j| f.entities.row_slice(gi * f.slots + j).to_vec())
            .collect();
        let q = project(&ents, f.store.get(f.layer.w_query));
        let k = project(&ents, f.store.get(f.layer.w_key));
        let v = project(&ents, f.store.get(f.layer.w_value));
        let vis = &f.visible[gi * f.slots..(gi + 1) * f.slots];
        let (att, _) = attention(&q, &k, &v, vis, 3);
        for i in 0..f.slots {
            let res: Vec<f64> = ents[i].iter().zip(&att[i]).map(|(a, b)| a + b).collect();
            let want = layer_norm(&res, gain, bias);
            assert!(max_diff(&[got[gi * f.slots + i].clone()], &[want]) < 1e-10);
        }
    }
}

#[test]
fn hidden_entity_content_does_not_leak_into_saqa() {
    let mut f = fixture(1, 4, 8, 4, 13);
    f.visible = vec![true, true, false, true];
    let run = |f: &Fixture| {
        let mut g = Graph::new();
        let emb = embeddings(&mut g, f);
        let out = f.layer.saqa(&mut g, &f.store, &emb).unwrap();
        g.value(out.context).clone()
    };
    let before = run(&f);
    let mut r = rng(99);
    let noise = normal(1, 8, &mut r);
    for c in 0..8 {
        let v = f.entities.get(2, c) + 10.0 * noise.get(0, c);
        f.entities.set(2, c, v);
    }
    assert_eq!(run(&f).max_abs_diff(&before), 0.0);
}

#[test]
fn observer_must_be_visible() {
    let mut f = fixture(2, 3, 4, 2, 14);
    f.visible[3] = false;
    let mut g = Graph::new();
    let emb = embeddings(&mut g, &f);
    assert!(matches!(
        f.layer.saqa(&mut g, &f.store, &emb),
        Err(Error::NoVisibleEntity)
    ));
}

#[test]
fn heads_must_divide_hidden() {
    assert!(AttentionConfig::new(6, 4).is_err());
    assert_eq!(AttentionConfig::new(8, 4).unwrap().head_dim(), 2);
}

#[test]
fn saqa_mac_count_is_linear_in_slots() {
    let macs = |slots: usize| {
        let f = fixture(1, slots, 8, 2, 15);
        let mut g = Graph::new();
        let emb = embeddings(&mut g, &f);
        f.layer.saqa(&mut g, &f.store, &emb).unwrap();
        g.macs()
    };
    // Query projection d^2, key and value projections 2 n d^2, scores and
    // weighted sum 2 n d.
    for n in [2, 5, 9] {
        assert_eq!(macs(n), (64 + 2 * n * 64 + 2 * n * 8) as u64);
    }
}

#[test]
fn linear_layer_is_affine() {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, true, &mut r);
    let x = normal(4, 3, &mut r);
    let mut g = Graph::new();
    let vx = g.input(x.clone());
    let y = lin.forward(&mut g, &store, vx).unwrap();
    let mut want = project(&rows(&x), store.get(lin.weight));
    let b = store.get(lin.bias.unwrap()).data();
    for row in &mut want {
        for (o, bj) in row.iter_mut().zip(b) {
            *o += bj;
        }
    }
    assert!(max_diff(&rows(g.value(y)), &want) < 1e-12);
    let bad = g.input(Array::zeros(1, 4));
    assert!(lin.forward(&mut g, &store, bad).is_err());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn gru_step_matches_gate_equations() {
    let (d_in, d) = (3, 4);
    let mut r = rng(17);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", d_in, d, &mut r);
    let x = normal(2, d_in, &mut r);
    let h = normal(2, d, &mut r);
    let mut g = Graph::new();
    let (vx, vh) = (g.input(x.clone()), g.input(h.clone()));
    let out = cell.step(&mut g, &store, vx, vh).unwrap();

    let gi = project(&rows(&x), store.get(cell.w_input));
    let gh = project(&rows(&h), store.get(cell.w_hidden));
    let bi = store.get(cell.b_input).data();
    let bh = store.get(cell.b_hidden).data();
    for row in 0..2 {
        for j in 0..d {
            let i_at = |c: usize| gi[row][c] + bi[c];
            let h_at = |c: usize| gh[row][c] + bh[c];
            let rg = sigmoid(i_at(j) + h_at(j));
            let zg = sigmoid(i_at(d + j) + h_at(d + j));
            let n = (i_at(2 * d + j) + rg * h_at(2 * d + j)).tanh();
            let want = (1.0 - zg) * n + zg * h.get(row, j);
            assert!((g.value(out).get(row, j) - want).abs() < 1e-12);
        }
    }
}
