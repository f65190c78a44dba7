//! Built-in randomized property checks, printing one ok/FAIL line each.
//! Seeded for reproducibility.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rtbridge::{parse_args, parse_format, FormatValue, Runtime};

fn check(name: &str, ok: bool) -> usize {
    if ok {
        println!("ok {name}");
        0
    } else {
        println!("FAIL {name}");
        1
    }
}

pub fn run_all(iterations: usize, seed: u64) -> usize {
    let mut failures = 0;
    failures += header_round_trip(iterations, seed);
    failures += conversion_round_trip(iterations, seed);
    failures += format_round_trip(iterations, seed);
    failures += list_coherence(iterations, seed);
    failures += lock_exclusion(iterations.max(50));
    failures += leak_audit(seed);
    failures
}

fn header_round_trip(iterations: usize, seed: u64) -> usize {
    let rt = Runtime::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1);
    let ok = rt.with_world(|w| {
        let mut refs = Vec::new();
        for i in 0..iterations {
            let r = if rng.gen_bool(0.5) {
                w.native.new_int(i as i64).unwrap()
            } else {
                w.native.new_list(vec![]).unwrap()
            };
            refs.push(r);
        }
        refs.iter().all(|&r| w.native.from_header(w.native.as_header(r)) == r)
    });
    check("header-round-trip", ok)
}

fn conversion_round_trip(iterations: usize, seed: u64) -> usize {
    let rt = Runtime::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2);
    let mut ok = true;
    for i in 0..iterations {
        let r = rt.with_world(|w| match rng.gen_range(0..3) {
            0 => w.native.new_int(i as i64).unwrap(),
            1 => w.native.new_str(format!("s{i}").into_bytes()).unwrap(),
            _ => w.native.new_list(vec![]).unwrap(),
        });
        let h = rt.to_managed(Some(r)).unwrap().unwrap();
        ok &= rt.to_native(Some(h)).unwrap() == Some(r);
    }
    check("conversion-round-trip", ok)
}

fn format_round_trip(iterations: usize, seed: u64) -> usize {
    let rt = Runtime::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3);
    let mut ok = true;
    for _ in 0..iterations {
        let arity = rng.gen_range(1..=6);
        let mut fmt = String::new();
        let mut values = Vec::new();
        for i in 0..arity {
            match rng.gen_range(0..3) {
                0 => {
                    fmt.push('i');
                    values.push(FormatValue::Int(rng.gen_range(-100..100)));
                }
                1 => {
                    fmt.push('d');
                    values.push(FormatValue::Real(i as f64 + 0.5));
                }
                _ => {
                    fmt.push('s');
                    values.push(FormatValue::Bytes(format!("v{i}").into_bytes()));
                }
            }
        }
        ok &= rt.with_world(|w| {
            let spec = parse_format(&fmt).unwrap();
            let built = rtbridge::build_value(w, &spec, &values).unwrap();
            let tuple = if spec.units.len() == 1 {
                w.native.new_tuple(vec![built]).unwrap()
            } else {
                w.native.incref(built);
                built
            };
            let out = parse_args(w, &spec, tuple).unwrap();
            w.native.decref(tuple);
            w.native.decref(built);
            out == values
        });
    }
    check("format-round-trip", ok)
}

fn list_coherence(iterations: usize, seed: u64) -> usize {
    let rt = Runtime::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4);
    let mut ok = true;
    for _ in 0..iterations.min(100) {
        let list = rt.managed_list(vec![]);
        rt.root(list);
        let native = rt.to_native(Some(list)).unwrap().unwrap();
        let mut shadow: Vec<i64> = Vec::new();
        for _ in 0..20 {
            match rng.gen_range(0..3) {
                0 => {
                    let v = rng.gen_range(-50..50);
                    let h = rt.managed_int(v);
                    rt.with_world(|w| w.managed_list_append(list, h)).unwrap();
                    shadow.push(v);
                }
                1 => {
                    let v = rng.gen_range(-50..50);
                    rt.with_world(|w| {
                        let vr = w.native.new_int(v).unwrap();
                        w.native_list_append(native, vr);
                        w.native.decref(vr);
                    });
                    shadow.push(v);
                }
                _ => {
                    if !shadow.is_empty() {
                        rt.with_world(|w| w.native_list_pop(native)).unwrap();
                        shadow.pop();
                    }
                }
            }
        }
        let via_managed: Vec<i64> = rt.with_world(|w| {
            w.managed_list_items(list)
                .unwrap()
                .iter()
                .map(|&h| match w.managed.object(h).payload {
                    rtbridge::MPayload::Int(v) => v,
                    _ => i64::MIN,
                })
                .collect()
        });
        let via_native: Vec<i64> = rt.with_world(|w| {
            w.native_list_items(native)
                .iter()
                .map(|&r| w.native.int_value(r).unwrap_or(i64::MIN))
                .collect()
        });
        ok &= via_managed == shadow && via_native == shadow;
        rt.unroot(list);
    }
    check("list-coherence", ok)
}

fn lock_exclusion(entries: usize) -> usize {
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;
    let rt = Runtime::new();
    let counter = Arc::new(AtomicU64::new(0));
    std::thread::scope(|scope| {
        for _ in 0..4 {
            let rt = rt.clone();
            let counter = Arc::clone(&counter);
            scope.spawn(move || {
                for _ in 0..entries {
                    let _guard = rt.enter_native();
                    let v = counter.load(Ordering::Relaxed);
                    std::hint::spin_loop();
                    counter.store(v + 1, Ordering::Relaxed);
                }
            });
        }
    });
    let ok = counter.load(std::sync::atomic::Ordering::Relaxed) == 4 * entries as u64;
    check("lock-exclusion", ok)
}

fn leak_audit(seed: u64) -> usize {
    let rt = Runtime::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5);
    let mut bound = Vec::new();
    for i in 0..50 {
        let demo = rt.import_module("demo").unwrap();
        let point_t = rt.find_attr(demo, "Point").unwrap().unwrap();
        let x = rt.managed_int(rng.gen_range(-9..9));
        let y = rt.managed_int(i);
        let p = rt.call_with(point_t, &[x, y]).unwrap();
        if rng.gen_bool(0.5) {
            rt.root(p);
            bound.push(p);
        }
    }
    for &p in &bound {
        rt.unroot(p);
    }
    rt.gc_full();
    let (live, reachable) = rt.leak_audit();
    check("leak-audit", live == reachable)
}
