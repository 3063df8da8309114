mod common;

use common::*;
use fedmn::network::{forward, ForwardOptions};
use fedmn::{
    active_mask, ArchitectureSpec, DecisionVector, HypernetSpec, ModulePool, ParamId, Slot, Tensor,
};
use rand::Rng;

#[test]
fn all_ones_forward_is_the_dense_composition_bit_for_bit() {
    for seed in 0..20 {
        let r = &mut rng(seed);
        let layers = r.random_range(2..5);
        let widths: Vec<usize> = (0..layers).map(|_| r.random_range(1..4)).collect();
        let hidden = r.random_bool(0.5).then_some(5);
        let spec = ArchitectureSpec::new(widths, 4, 6, hidden, 5, 3).unwrap();
        let pool = ModulePool::init(spec.clone(), None, r).unwrap();
        let x = random_tensor(r, &[7, 4], 2.0);
        let got = forward(&x, &all_ones(&spec), &pool, ForwardOptions::default()).unwrap();
        let want = dense_oracle(&pool, &x);
        for (i, row) in want.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(
                    got.get(i, j).to_bits(),
                    v.to_bits(),
                    "seed {seed} [{i},{j}]"
                );
            }
        }
    }
}

#[test]
fn active_mask_matches_graph_search_exhaustively() {
    for widths in [
        vec![1, 2, 2],
        vec![2, 2, 2],
        vec![1, 1, 1, 1],
        vec![2, 1, 3],
        vec![1, 3, 1],
    ] {
        let spec = ArchitectureSpec::new(widths.clone(), 2, 2, None, 2, 2).unwrap();
        let e = spec.path_count();
        assert!(e <= 10, "{widths:?}");
        for x in 0..1u64 << e {
            let bits = bits_of(x, e);
            let mask = active_mask(&DecisionVector::hard(&bits), &spec).unwrap();
            assert_eq!(mask.0, reachable_blocks(&spec, &bits), "{widths:?} {x:b}");
        }
    }
}

fn set(
    pool: &mut ModulePool,
    layer: usize,
    block: usize,
    slot: Slot,
    shape: &[usize],
    data: &[f64],
) {
    pool.set_value(
        ParamId::new(layer, block, slot),
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap(),
    )
    .unwrap();
}

#[test]
fn hand_traced_forward_on_a_small_network() {
    // input 2, encoder 2 -> 2, blocks single affine 2 -> 2, classes 2
    let spec = ArchitectureSpec::new(vec![1, 2, 2], 2, 2, None, 2, 2).unwrap();
    let mut pool = ModulePool::init(spec.clone(), None, &mut rng(0)).unwrap();
    set(&mut pool, 1, 0, Slot::W1, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    set(&mut pool, 1, 0, Slot::B1, &[2], &[0.0, -1.0]);
    set(&mut pool, 2, 0, Slot::W1, &[2, 2], &[2.0, 0.0, 0.0, 2.0]);
    set(&mut pool, 2, 0, Slot::B1, &[2], &[0.0, 0.0]);
    set(&mut pool, 2, 1, Slot::W1, &[2, 2], &[0.0, 1.0, 1.0, 0.0]);
    set(&mut pool, 2, 1, Slot::B1, &[2], &[1.0, 1.0]);
    set(&mut pool, 3, 0, Slot::W1, &[2, 2], &[1.0, 1.0, 0.0, 0.0]);
    set(&mut pool, 3, 0, Slot::B1, &[2], &[0.0, 0.5]);
    set(&mut pool, 3, 1, Slot::W1, &[2, 2], &[-1.0, 0.0, 0.0, 1.0]);
    set(&mut pool, 3, 1, Slot::B1, &[2], &[0.0, 0.0]);
    let x = Tensor::new(vec![1, 2], vec![3.0, 0.5]).unwrap();

    // z = relu([3, -0.5]) = [3, 0]
    // layer 2: A = relu(2z) = [6, 0]; B = relu([0+1, 3+1]) = [1, 4]
    // layer 3, block 0 reads mean(A, B) = [3.5, 2] -> [3.5, 4.0]
    // layer 3, block 1 reads B only -> [-1, 4]
    // logits = mean of both outputs = [1.25, 4.0]
    let mut bits = vec![true; spec.path_count()];
    bits[spec.gate_index(3, 1, 0)] = false;
    let got = forward(
        &x,
        &DecisionVector::hard(&bits),
        &pool,
        ForwardOptions::default(),
    )
    .unwrap();
    assert_eq!(got.data(), &[1.25, 4.0]);

    // closing the first output gate leaves block 1 alone
    bits[spec.output_offset()] = false;
    let got = forward(
        &x,
        &DecisionVector::hard(&bits),
        &pool,
        ForwardOptions::default(),
    )
    .unwrap();
    assert_eq!(got.data(), &[-1.0, 4.0]);
}

#[test]
fn inactive_block_parameters_do_not_change_logits() {
    let spec = ArchitectureSpec::new(vec![1, 3, 2], 3, 4, Some(4), 4, 3).unwrap();
    let pool = ModulePool::init(spec.clone(), Some(HypernetSpec::default()), &mut rng(4)).unwrap();
    let mut bits = vec![true; spec.path_count()];
    bits[spec.gate_index(2, 2, 0)] = false;
    let decision = DecisionVector::hard(&bits);
    let x = random_tensor(&mut rng(5), &[6, 3], 1.0);
    let before = forward(&x, &decision, &pool, ForwardOptions::default()).unwrap();
    let mut perturbed = pool.clone();
    for slot in [Slot::W1, Slot::B1, Slot::W2, Slot::B2] {
        let id = ParamId::new(2, 2, slot);
        let shape = perturbed.param(id).unwrap().value.shape().to_vec();
        perturbed
            .set_value(id, random_tensor(&mut rng(6), &shape, 50.0))
            .unwrap();
    }
    let after = forward(&x, &decision, &perturbed, ForwardOptions::default()).unwrap();
    assert_eq!(before, after);
}
