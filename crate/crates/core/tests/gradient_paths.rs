use diffcore::{Graph, ParamId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flownerf::camgeo::{CameraIntrinsics, SampleBatch};
use flownerf::losses::{loss_flow, loss_rgb};
use flownerf::trainer::model::{forward, Group, Model};
use flownerf::trainer::TrainConfig;

fn tiny(cfg_edit: impl FnOnce(&mut TrainConfig)) -> (Model, CameraIntrinsics) {
    let mut cfg = TrainConfig::desk();
    cfg.samples = 6;
    cfg.geometry_width = 12;
    cfg.projection_width = 8;
    cfg.feature_width = 6;
    cfg.canonical_width = 12;
    cfg.embedding_width = 12;
    cfg.latent_width = 6;
    cfg.bijection_hidden = 8;
    cfg.position_frequencies = 3;
    cfg.direction_frequencies = 2;
    cfg.near = 0.5;
    cfg.far = 4.0;
    cfg_edit(&mut cfg);
    let mut model = Model::new(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for id in model.nets.bijection.output_params() {
        let t = model.store.value(id);
        let v = Tensor::from_fn(t.shape().to_vec(), |_| rng.random_range(-0.05..0.05)).unwrap();
        model.store.set_value(id, v).unwrap();
    }
    (model, CameraIntrinsics::centered(20.0, 16, 12).unwrap())
}

fn batch(model: &Model, k: &CameraIntrinsics) -> SampleBatch {
    let pixels = vec![[3.0, 4.0], [8.5, 6.0], [12.0, 2.0], [5.0, 10.0]];
    SampleBatch::new::<ChaCha8Rng>(pixels, 0, 1, k, &model.config.sampling(), None).unwrap()
}

fn has_grad(model: &Model, ids: &[ParamId]) -> bool {
    ids.iter().any(|&id| model.store.grad(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)))
}

enum Loss {
    Rgb,
    Flow,
}

/// Backpropagates one loss and reports which groups and which of the two
/// pose inputs received gradient.
fn reach(model: &mut Model, k: &CameraIntrinsics, loss: Loss) -> (Vec<Group>, bool, bool) {
    let b = batch(model, k);
    model.store.clear_grads();
    let mut g = Graph::new();
    let pi = g.input(Tensor::vector(vec![0.01, -0.02, 0.03, 0.05, 0.0, -0.04]).unwrap()).unwrap();
    let pj = g.input(Tensor::vector(vec![-0.02, 0.01, 0.0, 0.1, 0.02, 0.03]).unwrap()).unwrap();
    let l = match loss {
        Loss::Rgb => {
            let f = forward(&mut g, &model.nets, &model.store, &model.config, k, &b, pi, None).unwrap();
            loss_rgb(&mut g, f.render.rgb, &Tensor::from_fn(vec![4, 3], |_| 0.3).unwrap()).unwrap()
        }
        Loss::Flow => {
            let f = forward(&mut g, &model.nets, &model.store, &model.config, k, &b, pi, Some(pj)).unwrap();
            let c = f.correspondence.unwrap();
            let target = Tensor::from_fn(vec![4, 2], |i| b.pixels[i / 2][i % 2] + 2.5).unwrap();
            loss_flow(&mut g, c.pixels, &target, &c.valid).unwrap()
        }
    };
    g.backward(l, &mut model.store).unwrap();
    let nonzero = |v| g.grad(v).is_some_and(|s| s.iter().any(|&x| x != 0.0));
    let (gi, gj) = (nonzero(pi), nonzero(pj));
    let groups = Group::ALL.into_iter().filter(|&gr| gr != Group::Pose && has_grad(model, &model.group_params(gr))).collect();
    (groups, gi, gj)
}

#[test]
fn photometric_loss_reaches_every_network_through_the_message() {
    let (mut m, k) = tiny(|_| {});
    let (groups, gi, gj) = reach(&mut m, &k, Loss::Rgb);
    assert!(gi && !gj);
    for gr in [Group::Geometry, Group::Canonical, Group::Bijection, Group::Embedding] {
        assert!(groups.contains(&gr), "{} unreached: {groups:?}", gr.name());
    }
}

#[test]
fn detached_or_disabled_message_stops_at_the_geometry_field() {
    for edit in [
        (|c: &mut TrainConfig| c.message_detach = true) as fn(&mut TrainConfig),
        |c: &mut TrainConfig| c.message_passing = false,
    ] {
        let (mut m, k) = tiny(edit);
        let (groups, gi, _) = reach(&mut m, &k, Loss::Rgb);
        assert!(gi);
        assert_eq!(groups, vec![Group::Geometry]);
    }
}

#[test]
fn flow_loss_reaches_both_poses_and_the_flow_networks() {
    let (mut m, k) = tiny(|_| {});
    let (groups, gi, gj) = reach(&mut m, &k, Loss::Flow);
    assert!(gi && gj);
    for gr in [Group::Canonical, Group::Bijection, Group::Embedding] {
        assert!(groups.contains(&gr), "{} unreached: {groups:?}", gr.name());
    }
    assert!(!groups.contains(&Group::Geometry));
}

#[test]
fn same_pose_maps_rays_onto_themselves() {
    let (m, k) = tiny(|_| {});
    let b = batch(&m, &k);
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(vec![0.02, 0.01, -0.03, 0.1, 0.0, 0.2]).unwrap()).unwrap();
    let f = forward(&mut g, &m.nets, &m.store, &m.config, &k, &b, p, Some(p)).unwrap();
    let c = f.correspondence.unwrap();
    assert!(c.valid.iter().any(|&v| v));
    let px = g.value(c.pixels).data();
    for (r, pix) in b.pixels.iter().enumerate() {
        if c.valid[r] {
            assert!((px[2 * r] - pix[0]).abs() < 1e-6 && (px[2 * r + 1] - pix[1]).abs() < 1e-6);
        }
    }
}

#[test]
fn swapping_poses_swaps_latents() {
    let (m, _) = tiny(|_| {});
    let a = Tensor::vector(vec![0.1, 0.0, -0.2, 0.3, 0.1, 0.0]).unwrap();
    let b = Tensor::vector(vec![-0.1, 0.2, 0.0, 0.0, -0.3, 0.5]).unwrap();
    let embed_pair = |x: &Tensor, y: &Tensor| {
        let mut g = Graph::new();
        let vx = g.constant(x.clone()).unwrap();
        let vy = g.constant(y.clone()).unwrap();
        let ex = m.nets.embedding.embed(&mut g, &m.store, vx).unwrap();
        let ey = m.nets.embedding.embed(&mut g, &m.store, vy).unwrap();
        (g.value(ex).data().to_vec(), g.value(ey).data().to_vec())
    };
    let (pa, pb) = embed_pair(&a, &b);
    let (qb, qa) = embed_pair(&b, &a);
    assert_eq!(pa, qa);
    assert_eq!(pb, qb);
    assert_ne!(pa, pb);
}
