// Rough throughput check for the conv kernels at training-loop sizes.
use pansharp::autodiff::{fmla, ConvWeights, Graph, Padding};
use pansharp::ImageTensor;
use std::time::Instant;

fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (sa, sb) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] = fmla(sa[j], sb[j], lanes[j]);
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        tail = fmla(x, y, tail);
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) + tail
}

// variant A: per-kx lane_dot
fn dw_a(input: &ImageTensor, gy: &ImageTensor, kh: usize, kw: usize) -> Vec<f64> {
    let (ic_n, ih, iw) = input.shape();
    let (oc_n, oh, ow) = gy.shape();
    let ind = input.data();
    let gd = gy.data();
    let mut out = vec![0.0; oc_n * ic_n * kh * kw];
    for oc in 0..oc_n {
        for ic in 0..ic_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let gyrow = &gd[(oc * oh + y) * ow..][..ow];
                        let xrow = &ind[(ic * ih + y + ky) * iw..][..iw];
                        acc += lane_dot(gyrow, &xrow[kx..kx + ow]);
                    }
                    out[((oc * ic_n + ic) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    out
}

// variant B: 2 output channels share the x row loads
fn dw_b(input: &ImageTensor, gy: &ImageTensor, kh: usize, kw: usize) -> Vec<f64> {
    let (ic_n, ih, iw) = input.shape();
    let (oc_n, oh, ow) = gy.shape();
    let ind = input.data();
    let gd = gy.data();
    let mut out = vec![0.0; oc_n * ic_n * kh * kw];
    let mut oc = 0;
    while oc + 2 <= oc_n {
        for ic in 0..ic_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut l0 = [0.0f64; 8];
                    let mut l1 = [0.0f64; 8];
                    for y in 0..oh {
                        let g0 = &gd[(oc * oh + y) * ow..][..ow];
                        let g1 = &gd[((oc + 1) * oh + y) * ow..][..ow];
                        let xrow = &ind[(ic * ih + y + ky) * iw + kx..][..ow];
                        let c0 = g0.chunks_exact(8);
                        let c1 = g1.chunks_exact(8);
                        let cx = xrow.chunks_exact(8);
                        for ((a, b), x) in c0.zip(c1).zip(cx) {
                            for j in 0..8 {
                                l0[j] = fmla(a[j], x[j], l0[j]);
                                l1[j] = fmla(b[j], x[j], l1[j]);
                            }
                        }
                        for x in (ow / 8) * 8..ow {
                            l0[0] = fmla(g0[x], xrow[x], l0[0]);
                            l1[0] = fmla(g1[x], xrow[x], l1[0]);
                        }
                    }
                    let s0: f64 = l0.iter().sum();
                    let s1: f64 = l1.iter().sum();
                    out[((oc * ic_n + ic) * kh + ky) * kw + kx] = s0;
                    out[(((oc + 1) * ic_n + ic) * kh + ky) * kw + kx] = s1;
                }
            }
        }
        oc += 2;
    }
    out
}

// variant C: 4 kernel columns fused per pass (current lib version shape)
fn dw_c(input: &ImageTensor, gy: &ImageTensor, kh: usize, kw: usize) -> Vec<f64> {
    const KXB: usize = 4;
    let (ic_n, ih, iw) = input.shape();
    let (oc_n, oh, ow) = gy.shape();
    let ind = input.data();
    let gd = gy.data();
    let mut out = vec![0.0; oc_n * ic_n * kh * kw];
    let chunks = ow / 8;
    for oc in 0..oc_n {
        for ic in 0..ic_n {
            for ky in 0..kh {
                let mut kx0 = 0;
                while kx0 + KXB <= kw {
                    let mut lanes = [[0.0f64; 8]; KXB];
                    for y in 0..oh {
                        let gyrow = &gd[(oc * oh + y) * ow..][..ow];
                        let xrow = &ind[(ic * ih + y + ky) * iw..][..iw];
                        unsafe {
                            for t in 0..chunks {
                                let x = t * 8;
                                let gv = gyrow.get_unchecked(x..x + 8);
                                for l in 0..KXB {
                                    let xv = xrow.get_unchecked(x + kx0 + l..x + kx0 + l + 8);
                                    for j in 0..8 {
                                        lanes[l][j] = fmla(gv[j], xv[j], lanes[l][j]);
                                    }
                                }
                            }
                        }
                        for x in chunks * 8..ow {
                            let gv = gyrow[x];
                            for l in 0..KXB {
                                lanes[l][0] = fmla(gv, xrow[x + kx0 + l], lanes[l][0]);
                            }
                        }
                    }
                    for (l, lane) in lanes.iter().enumerate() {
                        out[((oc * ic_n + ic) * kh + ky) * kw + kx0 + l] = lane.iter().sum();
                    }
                    kx0 += KXB;
                }
                for kx in kx0..kw {
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let gyrow = &gd[(oc * oh + y) * ow..][..ow];
                        let xrow = &ind[(ic * ih + y + ky) * iw..][..iw];
                        acc += lane_dot(gyrow, &xrow[kx..kx + ow]);
                    }
                    out[((oc * ic_n + ic) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    out
}


// variant D: 2 output channels x 4 kernel columns, 4-wide lanes
fn dw_d(input: &ImageTensor, gy: &ImageTensor, kh: usize, kw: usize) -> Vec<f64> {
    let (ic_n, ih, iw) = input.shape();
    let (oc_n, oh, ow) = gy.shape();
    let ind = input.data();
    let gd = gy.data();
    let mut out = vec![0.0; oc_n * ic_n * kh * kw];
    let chunks = ow / 4;
    let mut oc = 0;
    while oc + 2 <= oc_n {
        for ic in 0..ic_n {
            for ky in 0..kh {
                let mut kx0 = 0;
                while kx0 + 4 <= kw {
                    let mut a0 = [[0.0f64; 4]; 4];
                    let mut a1 = [[0.0f64; 4]; 4];
                    for y in 0..oh {
                        let g0 = &gd[(oc * oh + y) * ow..][..ow];
                        let g1 = &gd[((oc + 1) * oh + y) * ow..][..ow];
                        let xrow = &ind[(ic * ih + y + ky) * iw..][..iw];
                        unsafe {
                            for t in 0..chunks {
                                let x = t * 4;
                                let gv0 = g0.get_unchecked(x..x + 4);
                                let gv1 = g1.get_unchecked(x..x + 4);
                                for l in 0..4 {
                                    let xv = xrow.get_unchecked(x + kx0 + l..x + kx0 + l + 4);
                                    for j in 0..4 {
                                        a0[l][j] = fmla(gv0[j], xv[j], a0[l][j]);
                                        a1[l][j] = fmla(gv1[j], xv[j], a1[l][j]);
                                    }
                                }
                            }
                        }
                        for x in chunks * 4..ow {
                            for l in 0..4 {
                                a0[l][0] = fmla(g0[x], xrow[x + kx0 + l], a0[l][0]);
                                a1[l][0] = fmla(g1[x], xrow[x + kx0 + l], a1[l][0]);
                            }
                        }
                    }
                    for l in 0..4 {
                        out[((oc * ic_n + ic) * kh + ky) * kw + kx0 + l] = a0[l].iter().sum();
                        out[(((oc + 1) * ic_n + ic) * kh + ky) * kw + kx0 + l] = a1[l].iter().sum();
                    }
                    kx0 += 4;
                }
                for kx in kx0..kw {
                    for (o, lane) in [(oc, 0), (oc + 1, 0)] {
                        let _ = lane;
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let gyrow = &gd[(o * oh + y) * ow..][..ow];
                            let xrow = &ind[(ic * ih + y + ky) * iw..][..iw];
                            acc += lane_dot(gyrow, &xrow[kx..kx + ow]);
                        }
                        out[((o * ic_n + ic) * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        }
        oc += 2;
    }
    out
}

fn bench(label: &str, macs: f64, mut f: impl FnMut() -> f64) {
    let reps = 3;
    let mut best = f64::INFINITY;
    let mut sink = 0.0;
    for _ in 0..reps {
        let t0 = Instant::now();
        sink += f();
        best = best.min(t0.elapsed().as_secs_f64());
    }
    println!("{label:24} {best:8.3} s   {:6.1} GFLOP/s  (sink {sink:.2e})", macs * 2.0 / best / 1e9);
}

fn main() {
    let h = 256;
    let w = 256;
    for &(ic, oc, k) in &[(5usize, 64usize, 9usize), (64, 32, 5), (32, 4, 5)] {
        let pad = k / 2;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let xpad = ImageTensor::new(ic, ph, pw, (0..ic * ph * pw).map(|i| (i as f64 * 0.001).sin()).collect()).unwrap();
        let gy = ImageTensor::new(oc, h, w, (0..oc * h * w).map(|i| (i as f64 * 0.0007).cos()).collect()).unwrap();
        let weights = ConvWeights::new(oc, ic, k, k, (0..oc * ic * k * k).map(|i| (i as f64 * 0.01).cos() * 0.01).collect()).unwrap();
        let macs = (ic * oc * k * k * h * w) as f64;

        bench(&format!("fwd {ic}->{oc} k{k}"), macs, || {
            let mut g = Graph::new();
            let x = g.constant(xpad.clone());
            let wn = g.constant_weights(weights.clone());
            let c = g.conv2d(x, wn, None, Padding::Valid).unwrap();
            g.tensor(c).data()[0]
        });
        let a = dw_a(&xpad, &gy, k, k);
        let b = dw_b(&xpad, &gy, k, k);
        let c = dw_c(&xpad, &gy, k, k);
        let diff_ab = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let diff_ac = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        println!("   consistency: |A-B| {diff_ab:.2e}  |A-C| {diff_ac:.2e}");
        bench(&format!("dW-A {ic}->{oc} k{k}"), macs, || dw_a(&xpad, &gy, k, k)[0]);
        bench(&format!("dW-B {ic}->{oc} k{k}"), macs, || dw_b(&xpad, &gy, k, k)[0]);
        bench(&format!("dW-C {ic}->{oc} k{k}"), macs, || dw_c(&xpad, &gy, k, k)[0]);
        let d = dw_d(&xpad, &gy, k, k);
        let diff_ad = a.iter().zip(&d).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        println!("   |A-D| {diff_ad:.2e}");
        bench(&format!("dW-D {ic}->{oc} k{k}"), macs, || dw_d(&xpad, &gy, k, k)[0]);
    }
}
