use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use docmark::analysis::{attention_delta_with, HeadAggregation};
use docmark::corpus::DocumentImage;
use docmark::tdump::{DumpKind, DumpMeta, PatchGrid, TensorDump};
use docmark::watermark::composite_with;
use docmark::{Execution, PositionMode, WatermarkContent, WatermarkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn page(w: u32, h: u32) -> DocumentImage {
    let mut img = DocumentImage::filled(w, h, [255; 3]);
    for y in (40..h - 40).step_by(24) {
        img.fill_rect(40, y, w - 40 - (y % 300), y + 10, [30, 30, 30]);
    }
    img
}

fn bench_composite(c: &mut Criterion) {
    let img = page(1700, 2200);
    let mut g = c.benchmark_group("composite");
    g.sample_size(10);
    for (content, position) in [
        (WatermarkContent::text(), PositionMode::Scattered),
        (WatermarkContent::Mask, PositionMode::Center),
    ] {
        let spec = WatermarkSpec::new(content, position).with_area_ratio(0.4).with_angle(45.0);
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, spec.slug()), &spec, |b, spec| {
                b.iter(|| composite_with(black_box(&img), spec, exec).unwrap())
            });
        }
    }
    g.finish();
}

fn softmax_dump(heads: usize, grid: usize, text: usize, seed: u64, condition: &str) -> TensorDump {
    let seq = text + grid * grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(heads * seq * seq);
    for _ in 0..heads * seq {
        let row: Vec<f32> = (0..seq).map(|_| rng.gen_range(0.0f32..2.0).exp()).collect();
        let sum: f32 = row.iter().sum();
        data.extend(row.iter().map(|v| v / sum));
    }
    let meta = DumpMeta {
        model_name: "bench".into(),
        item_id: "page".into(),
        condition_id: condition.into(),
        layer_index: 0,
        kind: DumpKind::Attention,
        grid: Some(PatchGrid {
            rows: grid,
            cols: grid,
            offset: text,
        }),
        valid_len: None,
    };
    TensorDump::new("attn", vec![heads, seq, seq], meta, data).unwrap()
}

fn bench_attention_delta(c: &mut Criterion) {
    let clean = softmax_dump(16, 24, 64, 1, "clean");
    let marked = softmax_dump(16, 24, 64, 2, "marked");
    let mut g = c.benchmark_group("attention_delta");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| attention_delta_with(black_box(&clean), black_box(&marked), HeadAggregation::Mean, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_composite, bench_attention_delta);
criterion_main!(benches);
