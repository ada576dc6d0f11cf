//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use maskfold_bench::{memory_report, run_benchmark, BenchmarkSpec, Mode, Preset};
use maskfold_core::attention::reference::explicit_mask_reference;
use maskfold_core::memory::{
    activation_elements, buffer_bound, kv_cache_elements, Decision, EventKind, BYTES_PER_ELEMENT,
};
use maskfold_core::runtime::reference::full_recompute_generate;
use maskfold_core::runtime::LayerWeights;
use maskfold_core::{
    fused_causal_softmax, fused_padding_softmax, make_batch, plan_folding, AttentionScores, BatchDescriptor,
    BufferPool, Engine, GenerationRequest, MaskKind, Model, ModelConfig, ModelShape, Phase, Scope, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(took)
}

/// Row softmax over the admitted keys in f64; hidden entries and padding
/// query rows are zero.
fn softmax_oracle(raw: &[f32], heads: usize, seq: usize, pads: &[usize], causal: bool) -> Vec<f64> {
    let mut out = vec![0.0f64; raw.len()];
    for plane in 0..raw.len() / (seq * seq) {
        let pad = pads[plane / heads];
        for i in pad..seq {
            let hi = if causal { i + 1 } else { seq };
            let row = &raw[(plane * seq + i) * seq..][..seq];
            let max = row[pad..hi].iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row[pad..hi].iter().map(|&v| (v as f64 - max).exp()).sum();
            for j in pad..hi {
                out[(plane * seq + i) * seq + j] = (row[j] as f64 - max).exp() / sum;
            }
        }
    }
    out
}

fn mask_fusion() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances = 1200;
    let mut worst = 0.0f64;
    for case in 0..instances {
        let batch = rng.gen_range(1..=4);
        let heads = rng.gen_range(1..=4);
        let seq = rng.gen_range(1..=16);
        let pads: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..seq)).collect();
        let desc = BatchDescriptor::new(seq, pads.clone()).map_err(|e| e.to_string())?;
        let raw: Vec<f32> = (0..batch * heads * seq * seq).map(|_| rng.gen_range(-10.0..10.0)).collect();
        for mask in [MaskKind::Causal, MaskKind::Padding] {
            let causal = mask == MaskKind::Causal;
            let input = Tensor::new(vec![batch * heads, seq, seq], raw.clone()).unwrap();
            let mut fused = AttentionScores::new(input, heads).unwrap();
            if causal {
                fused_causal_softmax(&mut fused, &desc).unwrap();
            } else {
                fused_padding_softmax(&mut fused, &desc).unwrap();
            }
            let input = Tensor::new(vec![batch * heads, seq, seq], raw.clone()).unwrap();
            let explicit = explicit_mask_reference(&AttentionScores::new(input, heads).unwrap(), &desc, mask).unwrap();
            let oracle = softmax_oracle(&raw, heads, seq, &pads, causal);
            let got = fused.tensor().data();
            for (idx, (&g, &e)) in got.iter().zip(explicit.tensor().data()).enumerate() {
                let o = oracle[idx];
                let diff = ((g - e).abs() as f64).max((g as f64 - o).abs());
                worst = worst.max(diff);
                ensure!(diff <= 1e-6, "case {case} {mask:?} element {idx}: fused {g}, explicit {e}, oracle {o}");
                if o == 0.0 {
                    ensure!(g == 0.0, "case {case} {mask:?}: masked element {idx} is {g}");
                }
            }
            for plane in 0..batch * heads {
                for i in pads[plane / heads]..seq {
                    let sum: f32 = fused.row(plane, i).iter().sum();
                    ensure!((sum - 1.0).abs() <= 1e-6, "case {case}: row sum {sum}");
                }
            }
        }
    }
    let took = within(Duration::from_secs(60), start)?;
    Ok(format!("{instances} instances x 2 masks, max error {worst:.2e}, {took:.2?}"))
}

fn folding_bijection() -> Outcome {
    let start = Instant::now();
    let check = |size: usize, cap: usize| -> Result<(), String> {
        let plan = plan_folding(size, cap).map_err(|e| e.to_string())?;
        let (t, n) = (plan.sub_block_count(), plan.threads_per_block());
        ensure!(n <= cap, "size {size} cap {cap}: {n} lanes");
        if size > cap {
            ensure!(n >= cap / 2, "size {size} cap {cap}: only {n} lanes");
        }
        let mut seen = vec![false; size];
        for s in 0..t {
            for lane in 0..n {
                if let Some(idx) = plan.map_index(s, lane).map_err(|e| e.to_string())? {
                    ensure!(idx < size && !seen[idx], "size {size} cap {cap}: index {idx} hit twice or out of range");
                    seen[idx] = true;
                }
            }
        }
        ensure!(seen.iter().all(|&s| s), "size {size} cap {cap}: index missed");
        Ok(())
    };
    for size in 1..=16384 {
        check(size, 1024)?;
    }
    for size in 1..=64 {
        check(size, 4)?;
    }
    let p = plan_folding(1280, 1024).unwrap();
    ensure!(
        (p.sub_block_count(), p.threads_per_block()) == (2, 640),
        "plan(1280) = ({}, {})",
        p.sub_block_count(),
        p.threads_per_block()
    );
    let took = within(Duration::from_secs(60), start)?;
    Ok(format!("sizes 1..=16384 (cap 1024) and 1..=64 (cap 4), plan(1280) = (2, 640), {took:.2?}"))
}

fn kv_cache_correctness() -> Outcome {
    let seeds = 120u64;
    let mut worst = 0.0f32;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = rng.gen_range(1..=4);
        let prompt = rng.gen_range(1..=8);
        let steps = rng.gen_range(1..=8);
        let cfg = ModelConfig::new(batch, 8, 2, 2, prompt, prompt + steps);
        let model = Model::random(ModelShape::for_config(&cfg, 16), seed).unwrap();
        let prompts: Vec<Vec<u32>> = (0..batch)
            .map(|_| (0..rng.gen_range(1..=prompt)).map(|_| rng.gen_range(0..16)).collect())
            .collect();
        let req = GenerationRequest::new(prompts, steps);
        let fused = Engine::new(cfg.clone()).unwrap().generate_with_logits(&model, &req).unwrap();
        let oracle = full_recompute_generate(&model, &req, &cfg).unwrap();
        ensure!(fused.tokens == oracle.tokens, "seed {seed}: {:?} vs {:?}", fused.tokens, oracle.tokens);
        for (a, b) in fused.logits.iter().zip(&oracle.logits) {
            worst = worst.max(a.max_abs_diff(b));
        }
        ensure!(worst <= 1e-4, "seed {seed}: logits differ by {worst}");
    }
    Ok(format!("{seeds} seeds identical, max logit error {worst:.2e}"))
}

fn perturb_pads(x: &Tensor, desc: &BatchDescriptor, rng: &mut ChaCha8Rng) -> Tensor {
    let (seq, h) = (x.dim(1), x.dim(2));
    let mut y = x.clone();
    for b in 0..desc.batch() {
        for p in 0..desc.pad(b).min(seq) {
            for v in &mut y.data_mut()[(b * seq + p) * h..][..h] {
                *v += rng.gen_range(-100.0..100.0);
            }
        }
    }
    y
}

fn non_pad_equal(a: &Tensor, b: &Tensor, desc: &BatchDescriptor, offset: usize) -> bool {
    let (len, h) = (a.dim(1), a.dim(2));
    (0..desc.batch()).all(|s| {
        (0..len)
            .filter(|&p| p + offset >= desc.pad(s))
            .all(|p| a.data()[(s * len + p) * h..][..h] == b.data()[(s * len + p) * h..][..h])
    })
}

fn pad_invariance() -> Outcome {
    let cases = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..cases {
        let batch = rng.gen_range(1..=4);
        let seq = rng.gen_range(2..=10);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let h = 8 * heads;
        let lengths: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=seq)).collect();
        let desc = make_batch(&lengths, Some(seq)).unwrap();
        let weights: Vec<_> = (0..2).map(|_| LayerWeights::random(h, &mut rng).unwrap()).collect();
        let cfg = ModelConfig::new(batch, h, 2, heads, seq, seq + 2);
        let x = Tensor::from_fn(&[batch, seq, h], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let y = perturb_pads(&x, &desc, &mut rng);
        let steps: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[batch, 1, h], |_| rng.gen_range(-1.0..1.0)).unwrap())
            .collect();

        // encoder: two stacked layers
        let encode = |input: &Tensor| {
            let mut e = Engine::new(cfg.clone()).unwrap();
            let mid = e.encoder_layer_forward(input, &weights[0], 0, &desc).unwrap();
            e.encoder_layer_forward(&mid, &weights[1], 1, &desc).unwrap()
        };
        ensure!(non_pad_equal(&encode(&x), &encode(&y), &desc, 0), "encoder case {case}");

        // decoder: prompt pass through two layers, then two cached steps
        let decode = |input: &Tensor| {
            let mut e = Engine::new(cfg.clone()).unwrap();
            let mut outs = Vec::new();
            let mut cur = input.clone();
            for (l, w) in weights.iter().enumerate() {
                cur = e.decoder_layer_forward(&cur, w, l, &desc, Phase::PromptParallel).unwrap();
            }
            outs.push(cur);
            for s in &steps {
                let mut cur = s.clone();
                for (l, w) in weights.iter().enumerate() {
                    cur = e.decoder_layer_forward(&cur, w, l, &desc, Phase::Incremental).unwrap();
                }
                outs.push(cur);
            }
            outs
        };
        let (a, b) = (decode(&x), decode(&y));
        ensure!(non_pad_equal(&a[0], &b[0], &desc, 0), "decoder prompt case {case}");
        ensure!(a[1..] == b[1..], "decoder incremental case {case}");
    }
    Ok(format!("{cases} encoder and {cases} decoder cases bit-exact"))
}

fn buffer_policy() -> Outcome {
    // within a module only an exact size is reused
    let mut pool = BufferPool::new();
    let a = pool.request(100, Scope::WithinModule, "t").unwrap();
    let slot = a.slot();
    pool.release(a).unwrap();
    let b = pool.request(90, Scope::WithinModule, "t").unwrap();
    ensure!(b.slot() != slot, "within-module reused a 100 buffer for 90");
    let c = pool.request(100, Scope::WithinModule, "t").unwrap();
    ensure!(c.slot() == slot, "within-module did not reuse the exact match");
    pool.release(b).unwrap();
    pool.release(c).unwrap();

    // across modules the first idle buffer that fits wins
    let mut pool = BufferPool::new();
    let held: Vec<_> = [50, 200, 120]
        .iter()
        .map(|&n| pool.request(n, Scope::AcrossModule, "t").unwrap())
        .collect();
    for h in held {
        pool.release(h).unwrap();
    }
    let d = pool.request(100, Scope::AcrossModule, "t").unwrap();
    ensure!(d.slot() == 1, "across-module picked slot {} instead of the first fit", d.slot());
    let e = pool.request(100, Scope::AcrossModule, "t").unwrap();
    ensure!(e.slot() == 2, "second across-module request picked slot {}", e.slot());
    let f = pool.request(300, Scope::AcrossModule, "t").unwrap();
    ensure!(f.slot() == 3 && pool.total_capacity() == 670, "oversized request did not allocate");
    let stats = pool.stats();
    ensure!(stats.malloc_count == 4 && stats.reuse_count == 2, "pool stats {stats:?}");

    // full desk-scale generation
    let cfg = ModelConfig::new(4, 256, 4, 4, 64, 128);
    let model = Model::random(ModelShape::for_config(&cfg, 1024), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompts = (0..4).map(|_| (0..64).map(|_| rng.gen_range(0..1024)).collect()).collect();
    let req = GenerationRequest::new(prompts, 64);
    let mut engine = Engine::new(cfg.clone()).unwrap();
    engine.generate(&model, &req).unwrap();
    let bound = buffer_bound(&cfg, 64).unwrap();
    let capacity = engine.pool().total_capacity();
    ensure!(capacity <= bound, "pool capacity {capacity} exceeds bound {bound}");

    let log = engine.pool().log();
    let cache_allocs: Vec<_> = log.events().iter().enumerate().filter(|(_, e)| e.event == EventKind::CacheAlloc).collect();
    ensure!(
        cache_allocs.len() == 3 && cache_allocs.iter().all(|(i, _)| *i < 3),
        "cache allocations after preallocation"
    );
    let mark = log.len();
    engine.generate(&model, &req).unwrap();
    let fresh = engine.pool().log().since(mark).iter().filter(|e| e.decision == Decision::New).count();
    ensure!(fresh == 0, "{fresh} allocations in a warm generation");
    Ok(format!("scripted traces ok, desk trace capacity {capacity} <= bound {bound}, 0 cache mallocs while decoding"))
}

fn memory_accounting() -> Outcome {
    let mut specs: Vec<BenchmarkSpec> = [Preset::A, Preset::B, Preset::C].map(BenchmarkSpec::desk).to_vec();
    specs.push(BenchmarkSpec {
        batch: 16,
        ..BenchmarkSpec::full_size(Preset::A)
    });
    specs.push(BenchmarkSpec {
        layers: 0,
        ..BenchmarkSpec::desk(Preset::C)
    });
    for spec in &specs {
        let r = memory_report(spec).map_err(|e| e.to_string())?;
        let cfg = spec.model_config();
        let (b, h, s, l, p) = (spec.batch, spec.hidden, spec.max_seq, spec.layers, spec.prompt);
        ensure!(r.memory.total() == r.memory_total, "{}: sum identity", spec.name);
        ensure!(r.memory.kv_cache == 2 * b * h * s * l * BYTES_PER_ELEMENT, "{}: kv bytes", spec.name);
        ensure!(kv_cache_elements(&cfg).unwrap() == 2 * b * h * s * l, "{}: kv elements", spec.name);
        ensure!(activation_elements(&cfg).unwrap() == 2 * b * h * p, "{}: activation elements", spec.name);
        ensure!(r.memory.activation == 2 * b * h * p * BYTES_PER_ELEMENT, "{}: activation bytes", spec.name);
        ensure!(r.memory.buffers <= r.buffer_bound, "{}: buffers over bound", spec.name);
    }
    let full = kv_cache_elements(&specs[3].model_config()).unwrap();
    ensure!(full == 805_306_368, "full-size kv elements {full}");

    let run = run_benchmark(&BenchmarkSpec {
        mode: Mode::Fused,
        repetitions: 1,
        steps: 4,
        ..BenchmarkSpec::desk(Preset::C)
    })
    .map_err(|e| e.to_string())?;
    ensure!(run.memory.total() == run.memory_total, "measured run: sum identity");
    ensure!(run.memory.buffers <= run.buffer_bound, "measured run: buffers over bound");
    Ok(format!("{} formula reports and a measured run consistent; full size kv = {full} elements", specs.len()))
}

fn directional_speedup() -> Outcome {
    let spec = BenchmarkSpec {
        steps: 64,
        repetitions: 3,
        mode: Mode::Both,
        ..BenchmarkSpec::desk(Preset::A)
    };
    let r = run_benchmark(&spec).map_err(|e| e.to_string())?;
    let (f, rf) = (r.fused.unwrap(), r.reference.unwrap());
    ensure!(r.tokens_match == Some(true), "fused and reference tokens differ");
    ensure!(f.prompt_passes == 1 && rf.prompt_passes == 64, "prompt passes {} vs {}", f.prompt_passes, rf.prompt_passes);
    ensure!(
        f.median_ms < rf.median_ms,
        "fused {:.1} ms not faster than reference {:.1} ms",
        f.median_ms,
        rf.median_ms
    );
    Ok(format!(
        "fused {:.1} ms vs reference {:.1} ms ({:.2}x), prompt passes 1 vs 64",
        f.median_ms,
        rf.median_ms,
        rf.median_ms / f.median_ms
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("mask fusion oracle equivalence", mask_fusion),
        ("folding bijection", folding_bijection),
        ("kv cache correctness", kv_cache_correctness),
        ("pad invariance", pad_invariance),
        ("buffer pool policy", buffer_policy),
        ("memory accounting", memory_accounting),
        ("directional speedup", directional_speedup),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({detail})", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
