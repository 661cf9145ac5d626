//! scratch kernel timing
use std::time::Instant;
use ugcanet::tensor::{Graph, Tensor};
use ugcanet::rng;
use ugcanet::gradcheck::rand_tensor;

fn time_op(label: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let reps = 3;
    for _ in 0..reps { f(); }
    println!("{label}: {:?}/iter", t0.elapsed() / reps);
}

#[test]
#[ignore]
fn bench() {
    let mut r = rng::stream(1, "bench");
    let x_img = rand_tensor(&mut r, &[8,3,64,64], 0.0, 1.0);
    let w_patch = rand_tensor(&mut r, &[16,3,7,7], -0.1, 0.1);
    time_op("patch conv 7x7 s4 (8x3x64x64)", || {
        let mut g = Graph::new();
        let x = g.input(x_img.clone());
        let w = g.input(w_patch.clone());
        let _ = g.conv2d(x, w, None, 4, 3).unwrap();
    });
    let x_fam = rand_tensor(&mut r, &[8,32,16,16], -1.0, 1.0);
    let w_fam = rand_tensor(&mut r, &[32,32,3,3], -0.1, 0.1);
    let off = rand_tensor(&mut r, &[8,18,16,16], -0.5, 0.5);
    time_op("deform 3x3 (8x32x16x16)", || {
        let mut g = Graph::new();
        let x = g.input(x_fam.clone());
        let w = g.input(w_fam.clone());
        let o = g.input(off.clone());
        let _ = g.deform_conv2d(x, w, o, 1, 1).unwrap();
    });
    let x_cat = rand_tensor(&mut r, &[8,64,16,16], -1.0, 1.0);
    let w_off = rand_tensor(&mut r, &[18,64,3,3], -0.1, 0.1);
    time_op("offset conv 3x3 (8x64x16x16)", || {
        let mut g = Graph::new();
        let x = g.input(x_cat.clone());
        let w = g.input(w_off.clone());
        let _ = g.conv2d(x, w, None, 1, 1).unwrap();
    });
    let toks = rand_tensor(&mut r, &[8,256,16], -1.0, 1.0);
    let wq = rand_tensor(&mut r, &[16,16], -0.3, 0.3);
    time_op("tokens matmul q (8x256x16 x 16x16)", || {
        let mut g = Graph::new();
        let t = g.input(toks.clone());
        let w = g.input(wq.clone());
        let _ = g.matmul(t, w).unwrap();
    });
    let up_in = rand_tensor(&mut r, &[8,32,16,16], -1.0, 1.0);
    time_op("upsample x2 (8x32x16x16)", || {
        let mut g = Graph::new();
        let x = g.input(up_in.clone());
        let _ = g.bilinear_upsample(x, 2).unwrap();
    });
    let perm_in = rand_tensor(&mut r, &[8,256,64], -1.0, 1.0);
    time_op("permute (8x256x64)->(0,2,1)", || {
        let mut g = Graph::new();
        let x = g.input(perm_in.clone());
        let _ = g.permute(x, &[0,2,1]).unwrap();
    });
    // dw conv at stage1 ffn: hidden 64 ch at 16x16
    let dw_in = rand_tensor(&mut r, &[8,64,16,16], -1.0, 1.0);
    let dw_w = rand_tensor(&mut r, &[64,1,3,3], -0.3, 0.3);
    time_op("dwconv 3x3 (8x64x16x16)", || {
        let mut g = Graph::new();
        let x = g.input(dw_in.clone());
        let w = g.input(dw_w.clone());
        let _ = g.depthwise_conv2d(x, w, None, 1).unwrap();
    });
    // stage2 patch embed: 8x16x16x16 -> 32ch k3 s2
    let s2_in = rand_tensor(&mut r, &[8,16,16,16], -1.0, 1.0);
    let s2_w = rand_tensor(&mut r, &[32,16,3,3], -0.1, 0.1);
    time_op("stage2 patch conv (8x16x16x16)", || {
        let mut g = Graph::new();
        let x = g.input(s2_in.clone());
        let w = g.input(s2_w.clone());
        let _ = g.conv2d(x, w, None, 2, 1).unwrap();
    });
}
