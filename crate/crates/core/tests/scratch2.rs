use innlab_core::interference::NoiseRealization;
use innlab_core::rng::split;
use innlab_core::{apply_interference, generate_backgrounds, InterferenceConfig};

fn ascii(data: &[f32], h: usize, w: usize, top: f32) {
    let ramp: &[u8] = b" .:-=+*#%@";
    for r in 0..h {
        let mut line = String::new();
        for c in 0..w {
            let v = (data[r * w + c] / top).clamp(0.0, 1.0);
            let idx = ((v * (ramp.len() - 1) as f32).round() as usize).min(ramp.len() - 1);
            line.push(ramp[idx] as char);
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn legibility_probe() {
    for size in [16usize, 24] {
        let dseed = 0xabcd_1234u64;
        let test = innlab_core::dataset::synthetic_glyphs(16, size, "test", dseed).unwrap();
        let icfg = InterferenceConfig::new(0.5, 0.4, 0.4, 8, 42).unwrap();
        let bgs = generate_backgrounds(8, 1, size, size, split(42, 6)).unwrap();
        for i in [0usize, 3, 7] {
            let img = &test.images[i];
            println!("== size {size} image {i} label {} clean:", test.labels[i]);
            ascii(img.pixels.data(), size, size, 1.0);
            let r = NoiseRealization::draw_for(&icfg, 42, img.id, 0, img.pixels.shape()).unwrap();
            let blended = apply_interference(&img.pixels, &icfg, &bgs, &r).unwrap();
            println!("-- transformed (bank {}):", r.background_index);
            ascii(blended.pixels.data(), size, size, 1.5);
        }
    }
}
