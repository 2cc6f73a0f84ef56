//! Independent enumerations of the reference architecture table: layer by
//! layer parameter counts and stage output shapes.

/// `(name, N per stage, F per stage)` exactly as tabulated.
pub const TABLE: [(&str, [usize; 4], [usize; 4]); 11] = [
    ("resnet-18", [2, 2, 2, 2], [64, 128, 256, 512]),
    ("resnet-34", [3, 4, 6, 3], [64, 128, 256, 512]),
    ("resnet-50", [3, 4, 6, 3], [64, 128, 256, 512]),
    ("resnet-101", [3, 4, 23, 3], [64, 128, 256, 512]),
    ("resnet-152", [3, 8, 36, 3], [64, 128, 256, 512]),
    ("resnet-200", [3, 24, 36, 3], [64, 128, 256, 512]),
    ("preact-200", [3, 24, 36, 3], [64, 128, 256, 512]),
    ("wrn-50", [3, 4, 6, 3], [128, 256, 512, 1024]),
    ("resnext-101", [3, 24, 36, 3], [128, 256, 512, 1024]),
    ("densenet-121", [6, 12, 24, 16], [64, 128, 256, 512]),
    ("densenet-201", [6, 12, 48, 32], [64, 128, 256, 896]),
];

fn conv(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k * k
}

fn bn(c: usize) -> usize {
    2 * c
}

fn fc(f: usize, classes: usize) -> usize {
    f * classes + classes
}

/// Learnable parameter count of a named configuration with `classes`
/// outputs.
pub fn param_count(name: &str, classes: usize) -> usize {
    let (_, blocks, widths) = TABLE.iter().find(|r| r.0 == name).copied().expect("known row");
    let family = name.split('-').next().unwrap();
    let basic = name == "resnet-18" || name == "resnet-34";
    let mut total = conv(3, 64, 7, 1) + bn(64);
    match family {
        "densenet" => {
            let k = 32;
            let mut c = 64;
            for s in 0..4 {
                assert_eq!(c, widths[s], "{name}: dense stage {s} input width");
                for _ in 0..blocks[s] {
                    total += bn(c) + conv(c, 4 * k, 1, 1) + bn(4 * k) + conv(4 * k, k, 3, 1);
                    c += k;
                }
                if s < 3 {
                    total += bn(c) + conv(c, c / 2, 3, 1);
                    c /= 2;
                }
            }
            total += bn(c) + fc(c, classes);
        }
        "resnet" if basic => {
            // Basic blocks with parameter-free zero-padding shortcuts.
            let mut c = 64;
            for s in 0..4 {
                let f = widths[s];
                for _ in 0..blocks[s] {
                    total += conv(c, f, 3, 1) + bn(f) + conv(f, f, 3, 1) + bn(f);
                    c = f;
                }
            }
            total += fc(c, classes);
        }
        _ => {
            let (expansion, groups) = match family {
                "resnet" | "preact" => (4, 1),
                "wrn" => (2, 1),
                "resnext" => (2, 32),
                other => panic!("unknown family {other}"),
            };
            let preact = family == "preact";
            let mut c = 64;
            for s in 0..4 {
                let f = widths[s];
                let out = f * expansion;
                for j in 0..blocks[s] {
                    let stride = if s > 0 && j == 0 { 2 } else { 1 };
                    total += conv(c, f, 1, 1) + conv(f, f, 3, groups) + conv(f, out, 1, 1);
                    total += if preact {
                        bn(c) + bn(f) + bn(f)
                    } else {
                        bn(f) + bn(f) + bn(out)
                    };
                    if stride != 1 || c != out {
                        total += conv(c, out, 1, 1) + bn(out);
                    }
                    c = out;
                }
            }
            if preact {
                total += bn(c);
            }
            total += fc(c, classes);
        }
    }
    total
}

fn out(len: usize, k: usize, s: usize, p: usize) -> usize {
    (len + 2 * p - k) / s + 1
}

/// `(stage, (c, t, h, w))` for a 112x112 input of `l` frames, batch 1.
pub fn stage_shapes(name: &str, l: usize) -> Vec<(String, [usize; 4])> {
    let (_, _, widths) = TABLE.iter().find(|r| r.0 == name).copied().expect("known row");
    let family = name.split('-').next().unwrap();
    let basic = name == "resnet-18" || name == "resnet-34";
    let expansion = match family {
        "resnet" if basic => 1,
        "resnet" | "preact" => 4,
        "wrn" | "resnext" => 2,
        _ => 1,
    };
    let mut rows = Vec::new();
    let (mut t, mut h) = (out(l, 7, 1, 3), out(112, 7, 2, 3));
    rows.push(("conv1".to_string(), [64, t, h, h]));
    t = out(t, 3, 2, 1);
    h = out(h, 3, 2, 1);
    rows.push(("pool1".to_string(), [64, t, h, h]));
    if family == "densenet" {
        let blocks = TABLE.iter().find(|r| r.0 == name).unwrap().1;
        let mut c = 64;
        for s in 0..4 {
            c += 32 * blocks[s];
            rows.push((format!("conv{}_x", s + 2), [c, t, h, h]));
            if s < 3 {
                c /= 2;
                t = out(t, 2, 2, 0);
                h = out(h, 2, 2, 0);
                rows.push((format!("transition{}", s + 1), [c, t, h, h]));
            }
        }
        rows.push(("final_norm".to_string(), [c, t, h, h]));
        rows.push(("global_pool".to_string(), [c, 1, 1, 1]));
    } else {
        for s in 0..4 {
            if s > 0 {
                t = out(t, 3, 2, 1);
                h = out(h, 3, 2, 1);
            }
            rows.push((format!("conv{}_x", s + 2), [widths[s] * expansion, t, h, h]));
        }
        let c = widths[3] * expansion;
        if family == "preact" {
            rows.push(("final_norm".to_string(), [c, t, h, h]));
        }
        rows.push(("global_pool".to_string(), [c, 1, 1, 1]));
    }
    rows
}
