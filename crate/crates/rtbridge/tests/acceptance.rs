//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Oracles here are independent re-implementations (brute-force
//! reachability, shadow sequences, grammar checkers), never the library's
//! own bookkeeping.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use rtbridge::lock::LockEventKind;
use rtbridge::managed::{ListBackend, MPayload, ManagedHandle};
use rtbridge::native::{Kind, Payload};
use rtbridge::scenario::{run_scenario, ScenarioConfig};
use rtbridge::valuefmt::{build_value, parse_args, parse_format, FormatValue};
use rtbridge::world::World;
use rtbridge::{NativeRef, Runtime};

fn rng_for(case: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5EED_0000 + case)
}

// ---- independent reachability oracle -------------------------------------------

/// Brute-force reachability over the true combined graph: managed
/// attributes and payload references, bridge links, native payload refs.
/// Mirrored bookkeeping edges are deliberately NOT followed.
fn oracle_reachable(w: &World) -> (BTreeSet<u64>, BTreeSet<u64>) {
    let mut seen_m = BTreeSet::new();
    let mut seen_n = BTreeSet::new();
    let mut work_m: Vec<ManagedHandle> = w.managed.roots.iter().copied().collect();
    let mut work_n: Vec<NativeRef> = Vec::new();

    while !work_m.is_empty() || !work_n.is_empty() {
        while let Some(h) = work_m.pop() {
            if !w.managed.is_live(h) || !seen_m.insert(h.0) {
                continue;
            }
            let obj = w.managed.object(h);
            for (_, &v) in obj.attributes.iter() {
                work_m.push(v);
            }
            match &obj.payload {
                MPayload::Tuple(items) => work_m.extend(items.iter().copied()),
                MPayload::List(ListBackend::Local(items)) => work_m.extend(items.iter().copied()),
                MPayload::List(ListBackend::NativeView(r)) => work_n.push(*r),
                MPayload::Dict(entries) => {
                    for &(k, v) in entries {
                        work_m.push(k);
                        work_m.push(v);
                    }
                }
                MPayload::Slice { start, stop, step } => {
                    work_m.extend([*start, *stop, *step]);
                }
                MPayload::Function { bound, .. } => {
                    if let Some(b) = bound {
                        work_m.push(*b);
                    }
                }
                MPayload::GcHeadCarrier { target } => work_n.push(*target),
                _ => {}
            }
            if let Some(r) = obj.native_peer {
                work_n.push(r);
            }
            if let Some(r) = w.handles.get(h) {
                work_n.push(r);
            }
        }
        while let Some(r) = work_n.pop() {
            if !w.native.is_live(r) || w.native.object(r).immortal {
                continue;
            }
            if !seen_n.insert(r.addr()) {
                continue;
            }
            w.native.visit_refs(r, |c| work_n.push(c));
            work_n.push(w.native.type_of(r));
            if let Some(id) = w.native.peer_of(r) {
                work_m.push(ManagedHandle(id));
            }
        }
    }
    (seen_m, seen_n)
}

// ---- criterion 1: lookup round-trip ---------------------------------------------

#[test]
fn criterion_1_lookup_round_trip() {
    let rt = Runtime::new();
    let mut rng = rng_for(1);
    let total = 10_000usize;

    // Native-origin objects of every supported kind.
    let mut natives: Vec<NativeRef> = Vec::new();
    rt.with_world(|w| {
        let point_t = w.statics.by_name("Point").unwrap();
        for i in 0..(total / 2) {
            let r = match rng.gen_range(0..13) {
                0 => w.native.new_int(i as i64).unwrap(),
                1 => w.native.new_float(i as f64 * 0.5).unwrap(),
                2 => w.native.new_str(format!("s{i}").into_bytes()).unwrap(),
                3 => {
                    let a = w.native.new_int(1).unwrap();
                    let t = w.native.new_tuple(vec![a]).unwrap();
                    w.native.decref(a);
                    t
                }
                4 => w.native.new_list(vec![]).unwrap(),
                5 => w.native.new_dict().unwrap(),
                6 => w
                    .native
                    .new_cfunction(rtbridge::native::CFunctionData {
                        name: format!("f{i}"),
                        fmt: "O".into(),
                        behavior: "identity".into(),
                        bound: None,
                    })
                    .unwrap(),
                7 => w.native.new_capsule(vec![i as u8]).unwrap(),
                8 => w.native.new_instance(point_t, vec![1, 2]).unwrap(),
                9 => {
                    let data = rtbridge::native::TypeData::plain(&format!("H{i}"), Kind::Instance);
                    w.native.new_heap_type(data).unwrap()
                }
                10 => w.native.new_module(&format!("m{i}")).unwrap(),
                11 => {
                    let a = w.native.new_int(0).unwrap();
                    let s = w.native.new_slice(a, a, a).unwrap();
                    w.native.decref(a);
                    s
                }
                _ => w.native.singletons.get(rtbridge::SingletonKind::None),
            };
            natives.push(r);
        }
    });
    for &r in &natives {
        let h = rt.to_managed(Some(r)).unwrap().unwrap();
        assert_eq!(rt.to_native(Some(h)).unwrap(), Some(r));
    }

    // Managed-origin objects per counterpart kind.
    let mut manageds: Vec<ManagedHandle> = Vec::new();
    for i in 0..(total / 2) {
        let h = rt.with_world(|w| match rng.gen_range(0..8) {
            0 => w.managed.new_object(MPayload::Int(i as i64)),
            1 => w.managed.new_object(MPayload::Float(i as f64 + 0.25)),
            2 => w.managed.new_object(MPayload::Str(format!("m{i}").into_bytes())),
            3 => {
                let a = w.managed.new_object(MPayload::Int(9));
                w.managed.new_object(MPayload::Tuple(vec![a]))
            }
            4 => {
                let a = w.managed.new_object(MPayload::Int(3));
                w.managed
                    .new_object(MPayload::List(ListBackend::Local(vec![a])))
            }
            5 => w.managed.new_object(MPayload::Dict(Vec::new())),
            6 => w.managed.new_object(MPayload::Module {
                name: format!("mm{i}"),
            }),
            _ => {
                let none = w.managed.intern(rtbridge::SingletonKind::None);
                w.managed.new_object(MPayload::Slice {
                    start: none,
                    stop: none,
                    step: none,
                })
            }
        });
        manageds.push(h);
    }
    for &h in &manageds {
        let r = rt.to_native(Some(h)).unwrap().unwrap();
        assert_eq!(rt.to_managed(Some(r)).unwrap(), Some(h));
    }

    // Null converts to null, both directions.
    assert_eq!(rt.to_managed(None).unwrap(), None);
    assert_eq!(rt.to_native(None).unwrap(), None);

    // Header arithmetic holds for 100% of live allocations, exactly.
    let (checked, ok) = rt.with_world(|w| {
        let live = w.native.live_dynamic();
        let ok = live
            .iter()
            .all(|&r| w.native.from_header(w.native.as_header(r)) == r);
        (live.len(), ok)
    });
    assert!(ok, "header arithmetic failed");
    assert!(checked >= total / 2);
    println!(
        "PASS criterion 1: lookup round-trip over {} objects, header arithmetic exact on {} allocations",
        natives.len() + manageds.len(),
        checked
    );
}

// ---- criterion 2: strategy conformance ------------------------------------------

#[test]
fn criterion_2_strategy_conformance() {
    use rtbridge::Strategy;
    let rt = Runtime::new();
    rt.with_world(|w| {
        let by_name = |w: &World, n: &str| w.statics.by_name(n).unwrap();
        for delegate in ["dict", "slice", "module"] {
            assert_eq!(
                w.strategy_for(by_name(w, delegate)),
                Strategy::Delegate,
                "{delegate} must delegate"
            );
        }
        for mirror in ["tuple", "list", "str", "int", "float"] {
            assert_eq!(
                w.strategy_for(by_name(w, mirror)),
                Strategy::Mirror,
                "{mirror} must mirror"
            );
        }
        // Extension custom types, both static and heap, plus the native-only
        // kinds.
        assert_eq!(w.strategy_for(by_name(w, "Point")), Strategy::Peer);
        let blob_t = w.extensions.type_ref("Blob").unwrap();
        assert_eq!(w.strategy_for(blob_t), Strategy::Peer);
        for peer in ["builtin_function_or_method", "capsule", "type"] {
            assert_eq!(w.strategy_for(by_name(w, peer)), Strategy::Peer);
        }
    });
    println!("PASS criterion 2: strategy table matches the stated examples exactly");
}

// ---- criterion 3: mirror coherence ----------------------------------------------

#[test]
fn criterion_3_mirror_coherence() {
    let sequences = 1_000usize;
    let rt = Runtime::new();
    for case in 0..sequences {
        let mut rng = rng_for(3_000 + case as u64);
        // Alternate list origin: managed-born (backend swap on conversion)
        // vs native-born (view from the start).
        let (list_h, list_r) = if case % 2 == 0 {
            let h = rt.managed_list(vec![]);
            rt.root(h);
            let r = rt.to_native(Some(h)).unwrap().unwrap();
            (h, r)
        } else {
            let r = rt.with_world(|w| w.native.new_list(vec![]).unwrap());
            let h = rt.to_managed(Some(r)).unwrap().unwrap();
            rt.root(h);
            rt.with_world(|w| w.native.decref(r));
            (h, r)
        };
        let mut shadow: Vec<i64> = Vec::new();
        for _ in 0..rng.gen_range(5..25) {
            match rng.gen_range(0..5) {
                0 => {
                    let v = rng.gen_range(-100..100);
                    let vh = rt.managed_int(v);
                    rt.with_world(|w| w.managed_list_append(list_h, vh)).unwrap();
                    shadow.push(v);
                }
                1 => {
                    let v = rng.gen_range(-100..100);
                    rt.with_world(|w| {
                        let vr = w.native.new_int(v).unwrap();
                        w.native_list_append(list_r, vr);
                        w.native.decref(vr);
                    });
                    shadow.push(v);
                }
                2 if !shadow.is_empty() => {
                    let idx = rng.gen_range(0..shadow.len());
                    let v = rng.gen_range(-100..100);
                    let vh = rt.managed_int(v);
                    rt.with_world(|w| w.managed_list_set(list_h, idx, vh)).unwrap();
                    shadow[idx] = v;
                }
                3 if !shadow.is_empty() => {
                    let idx = rng.gen_range(0..shadow.len());
                    let v = rng.gen_range(-100..100);
                    rt.with_world(|w| {
                        let vr = w.native.new_int(v).unwrap();
                        w.native_list_set(list_r, idx, vr).unwrap();
                        w.native.decref(vr);
                    });
                    shadow[idx] = v;
                }
                _ if !shadow.is_empty() => {
                    if rng.gen_bool(0.5) {
                        rt.with_world(|w| w.managed_list_pop(list_h)).unwrap();
                    } else {
                        rt.with_world(|w| w.native_list_pop(list_r)).unwrap();
                    }
                    shadow.pop();
                }
                _ => {}
            }
            // Both views must enumerate the shadow sequence exactly.
            let via_managed: Vec<i64> = rt.with_world(|w| {
                w.managed_list_items(list_h)
                    .unwrap()
                    .iter()
                    .map(|&h| match w.managed.object(h).payload {
                        MPayload::Int(v) => v,
                        _ => panic!("non-int list element"),
                    })
                    .collect()
            });
            let via_native: Vec<i64> = rt.with_world(|w| {
                w.native_list_items(list_r)
                    .iter()
                    .map(|&r| w.native.int_value(r).expect("int element"))
                    .collect()
            });
            assert_eq!(via_managed, shadow, "managed view diverged (case {case})");
            assert_eq!(via_native, shadow, "native view diverged (case {case})");
        }
        rt.unroot(list_h);
        rt.gc_full();
    }
    println!("PASS criterion 3: {sequences} interleaved mutation sequences match the shadow oracle on both views");
}

// ---- criterion 4: peer delegation -----------------------------------------------

#[test]
fn criterion_4_peer_delegation() {
    let fixtures = 500usize;
    let rt = Runtime::new();
    let demo = rt.import_module("demo").unwrap();
    let point_type = rt.find_attr(demo, "Point").unwrap().unwrap();
    for case in 0..fixtures {
        let mut rng = rng_for(4_000 + case as u64);
        let x = rng.gen_range(-1000..1000);
        let y = rng.gen_range(-1000..1000);
        let xa = rt.managed_int(x);
        let ya = rt.managed_int(y);
        let p = rt.call_with(point_type, &[xa, ya]).unwrap();
        rt.root(p);

        // Instance-dict attribute: x = foo.bar path through the boundary.
        let label = rng.gen_range(0..100);
        let lv = rt.managed_int(label);
        rt.set_attr(p, "bar", lv).unwrap();
        let bar = rt.find_attr(p, "bar").unwrap().expect("dict attribute");
        // Oracle: read the native instance dict directly.
        let oracle_bar = rt.with_world(|w| {
            let inst = w.to_native(Some(p)).unwrap().unwrap();
            let dict = match w.native.object(inst).payload {
                Payload::Instance { dict: Some(d), .. } => d,
                _ => panic!("instance without dict"),
            };
            let entries = match &w.native.object(dict).payload {
                Payload::Dict(entries) => entries.clone(),
                _ => panic!("dict payload"),
            };
            let v = entries
                .iter()
                .find(|(k, _)| {
                    matches!(&w.native.object(*k).payload, Payload::Str(b) if b == b"bar")
                })
                .map(|(_, v)| *v)
                .expect("bar in native dict");
            w.native.int_value(v).unwrap()
        });
        assert_eq!(oracle_bar, label);
        let got_bar = rt.with_world(|w| match w.managed.object(bar).payload {
            MPayload::Int(v) => v,
            _ => panic!("bar converted to non-int"),
        });
        assert_eq!(got_bar, oracle_bar);

        // Member attributes by offset.
        for (name, expected) in [("x", x), ("y", y)] {
            let h = rt.find_attr(p, name).unwrap().expect("member attribute");
            let got = rt.with_world(|w| match w.managed.object(h).payload {
                MPayload::Int(v) => v,
                _ => panic!("member converted to non-int"),
            });
            assert_eq!(got, expected, "member {name} (case {case})");
        }

        // Get-set attribute against an independently computed value.
        let norm = rt.find_attr(p, "norm").unwrap().expect("getset attribute");
        let got_norm = rt.with_world(|w| match w.managed.object(norm).payload {
            MPayload::Float(v) => v,
            _ => panic!("norm converted to non-float"),
        });
        let expected_norm = ((x as f64).powi(2) + (y as f64).powi(2)).sqrt();
        assert!((got_norm - expected_norm).abs() < 1e-12, "case {case}");

        // Absent attribute yields absent, with native error text recorded.
        assert!(rt.find_attr(p, "missing").unwrap().is_none());
        let recorded = rt.with_world(|w| w.last_native_error.clone());
        assert!(recorded.unwrap().contains("missing"));

        rt.unroot(p);
    }
    rt.gc_full();
    println!("PASS criterion 4: peer delegation returns oracle values across {fixtures} fixtures (dict, member, get-set)");
}

// ---- criterion 5: boundary lock -------------------------------------------------

#[test]
fn criterion_5_boundary_lock() {
    let rt = Runtime::new();
    rt.lock().enable_trace();
    let threads = 8usize;
    let entries = 1_000usize;
    let counter = Arc::new(AtomicU64::new(0));

    std::thread::scope(|scope| {
        for t in 0..threads {
            let rt = rt.clone();
            let counter = Arc::clone(&counter);
            scope.spawn(move || {
                for i in 0..entries {
                    let _guard = rt.enter_native();
                    // Deliberately non-atomic read-modify-write protected
                    // only by the boundary lock.
                    let v = counter.load(Ordering::Relaxed);
                    if (t + i) % 97 == 0 {
                        std::thread::yield_now();
                    }
                    counter.store(v + 1, Ordering::Relaxed);
                    if i % 251 == 0 {
                        rt.lock().allow_threads(|| std::hint::spin_loop());
                    }
                }
            });
        }
    });
    assert_eq!(
        counter.load(Ordering::Relaxed),
        (threads * entries) as u64,
        "interleaved increments detected"
    );

    // Managed callback window: thread B enters while A is in the callback.
    {
        let rt2 = rt.clone();
        let guard = rt.enter_native();
        rt.lock().callback_to_managed(move || {
            assert!(!rt2.lock().is_owned_by_current());
            let rt3 = rt2.clone();
            std::thread::spawn(move || {
                let _g = rt3.enter_native();
            })
            .join()
            .unwrap();
        });
        drop(guard);
    }

    // Replay the event trace: intervals of native execution never overlap,
    // per-thread acquisitions balance releases.
    let trace = rt.lock().take_trace();
    assert!(!trace.is_empty());
    let mut holder: Option<u64> = None;
    let mut balance: std::collections::BTreeMap<u64, i64> = std::collections::BTreeMap::new();
    let mut callback_window: Option<u64> = None;
    let mut entered_during_callback = false;
    for e in &trace {
        match e.kind {
            LockEventKind::Acquired => {
                assert!(
                    holder.is_none(),
                    "overlapping native intervals at seq {}",
                    e.seq
                );
                holder = Some(e.thread);
                *balance.entry(e.thread).or_default() += 1;
                if let Some(owner) = callback_window {
                    if e.thread != owner {
                        entered_during_callback = true;
                    }
                }
            }
            LockEventKind::Released => {
                assert_eq!(holder, Some(e.thread), "release by non-owner");
                holder = None;
                *balance.entry(e.thread).or_default() -= 1;
            }
            LockEventKind::CallbackBegin => callback_window = Some(e.thread),
            LockEventKind::CallbackEnd => callback_window = None,
            _ => {}
        }
    }
    assert!(holder.is_none(), "trace ends with the lock held");
    assert!(balance.values().all(|&v| v == 0), "depth imbalance: {balance:?}");
    assert!(
        entered_during_callback,
        "no thread entered during the managed callback window"
    );
    println!(
        "PASS criterion 5: {} trace events, zero overlapping intervals, depth balanced, callback window admits other threads",
        trace.len()
    );
}

// ---- criterion 6: GC safety under stale refreshes --------------------------------

struct GraphFixture {
    rt: Runtime,
    nodes: Vec<ManagedHandle>,
}

impl GraphFixture {
    fn build(rng: &mut ChaCha8Rng) -> Self {
        let rt = Runtime::new();
        let demo = rt.import_module("demo").unwrap();
        let point_type = rt.find_attr(demo, "Point").unwrap().unwrap();
        let mut nodes = Vec::new();
        let count = rng.gen_range(8..20);
        for i in 0..count {
            let h = match rng.gen_range(0..6) {
                0 => {
                    let a = rt.managed_int(rng.gen_range(-9..9));
                    let b = rt.managed_int(i as i64);
                    rt.call_with(point_type, &[a, b]).unwrap()
                }
                1 => rt.managed_list(vec![]),
                2 => {
                    // Native-born list, bridged.
                    let r = rt.with_world(|w| w.native.new_list(vec![]).unwrap());
                    let h = rt.to_managed(Some(r)).unwrap().unwrap();
                    rt.with_world(|w| w.native.decref(r));
                    h
                }
                3 => rt.with_world(|w| w.managed.new_object(MPayload::Dict(Vec::new()))),
                4 => rt.managed_int(i as i64),
                _ => rt.managed_str(&format!("n{i}")),
            };
            rt.root(h);
            nodes.push(h);
        }
        GraphFixture { rt, nodes }
    }

    fn mutate(&self, rng: &mut ChaCha8Rng) {
        let rt = &self.rt;
        let a = self.nodes[rng.gen_range(0..self.nodes.len())];
        let b = self.nodes[rng.gen_range(0..self.nodes.len())];
        let is_peer = rt.with_world(|w| matches!(w.managed.object(a).payload, MPayload::Peer));
        let is_list = rt.with_world(|w| matches!(w.managed.object(a).payload, MPayload::List(_)));
        let is_dict = rt.with_world(|w| matches!(w.managed.object(a).payload, MPayload::Dict(_)));
        match rng.gen_range(0..6) {
            0 if is_peer => {
                let name = format!("a{}", rng.gen_range(0..4));
                rt.set_attr(a, &name, b).unwrap();
            }
            1 if is_list => {
                rt.with_world(|w| w.managed_list_append(a, b)).unwrap();
            }
            2 if is_list => {
                let _ = rt.with_world(|w| w.managed_list_pop(a));
            }
            3 if is_dict => {
                let key = rt.managed_int(rng.gen_range(0..6));
                rt.with_world(|w| w.managed_dict_set(a, key, b));
            }
            4 => {
                // Attribute on an ordinary managed object.
                if !is_peer {
                    rt.set_attr(a, "link", b).unwrap();
                }
            }
            _ => {
                // Root churn.
                if rng.gen_bool(0.5) {
                    rt.unroot(a);
                } else {
                    rt.root(a);
                }
            }
        }
    }

    fn stale_refresh(&self, rng: &mut ChaCha8Rng) {
        // Scoped (partial) refresh: deliberately stale for everything
        // outside the random subset.
        let scope: Vec<NativeRef> = self.rt.with_world(|w| {
            w.native
                .live_dynamic()
                .into_iter()
                .filter(|_| rng.gen_bool(0.3))
                .collect()
        });
        self.rt.gc_refresh(Some(&scope));
    }
}

#[test]
fn criterion_6_gc_safety() {
    let graphs = 1_000usize;
    let mut violations = 0usize;
    for case in 0..graphs {
        let mut rng = rng_for(6_000 + case as u64);
        let fixture = GraphFixture::build(&mut rng);
        let rounds = rng.gen_range(1..3);
        for _ in 0..rounds {
            for _ in 0..rng.gen_range(3..10) {
                fixture.mutate(&mut rng);
            }
            if rng.gen_bool(0.7) {
                fixture.stale_refresh(&mut rng);
            }
            for _ in 0..rng.gen_range(2..6) {
                fixture.mutate(&mut rng);
            }
            // Snapshot the true graph, then collect against possibly stale
            // mirrors.
            let (reach_m, reach_n) =
                fixture.rt.with_world(|w| oracle_reachable(w));
            fixture.rt.gc_collect();
            fixture.rt.drain_finalizables();
            let ok = fixture.rt.with_world(|w| {
                reach_m.iter().all(|&id| w.managed.is_live(ManagedHandle(id)))
                    && reach_n
                        .iter()
                        .all(|&addr| w.native.is_live(NativeRef::new(addr)))
            });
            if !ok {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0, "GC safety violations detected");
    println!("PASS criterion 6: zero reachable objects reclaimed across {graphs} randomized stale-refresh graphs");
}

// ---- criterion 7: GC liveness (cycle reclamation) --------------------------------

#[test]
fn criterion_7_gc_liveness() {
    let rt = Runtime::new();
    let demo = rt.import_module("demo").unwrap();
    let point_type = rt.find_attr(demo, "Point").unwrap().unwrap();

    let baseline = |rt: &Runtime| rt.with_world(|w| (w.native.live_count(), w.managed.live_count()));

    // Settle conversion temporaries from setup.
    rt.gc_full();

    for shape in 0..3 {
        for size in 1..4usize {
            let before = baseline(&rt);
            let mut peers = Vec::new();
            for i in 0..size {
                let a = rt.managed_int(i as i64);
                let b = rt.managed_int((i + 1) as i64);
                let p = rt.call_with(point_type, &[a, b]).unwrap();
                rt.root(p);
                peers.push(p);
            }
            match shape {
                0 => {
                    // Ring of peers through native instance dicts.
                    for i in 0..size {
                        rt.set_attr(peers[i], "next", peers[(i + 1) % size]).unwrap();
                    }
                }
                1 => {
                    // Peers holding a shared bridged list that holds the peers.
                    let l = rt.managed_list(vec![]);
                    rt.root(l);
                    for &p in &peers {
                        rt.set_attr(p, "bag", l).unwrap();
                        rt.with_world(|w| w.managed_list_append(l, p)).unwrap();
                    }
                    rt.unroot(l);
                }
                _ => {
                    // Cycle through a native tuple: peer.pair = (peer, int).
                    for &p in &peers {
                        let pair = rt.with_world(|w| -> rtbridge::Result<ManagedHandle> {
                            let pr = w.to_native(Some(p))?.unwrap();
                            let k = w.native.new_int(5)?;
                            let t = w.native.new_tuple(vec![pr, k])?;
                            w.native.decref(k);
                            let th = w.to_managed(Some(t))?.unwrap();
                            w.native.decref(t);
                            Ok(th)
                        }).unwrap();
                        rt.set_attr(p, "pair", pair).unwrap();
                    }
                }
            }
            // Drop conversion temporaries made while wiring the cycle, then
            // measure.
            rt.gc_full();
            let with_cycle = baseline(&rt);
            assert!(with_cycle.0 > before.0 && with_cycle.1 > before.1);

            for &p in &peers {
                rt.unroot(p);
            }
            // Exactly one refresh + one collect + one drain.
            rt.gc_refresh(None);
            rt.gc_collect();
            rt.drain_finalizables();
            let after = baseline(&rt);
            assert_eq!(
                after, before,
                "cycle not fully reclaimed (shape {shape}, size {size}): {before:?} -> {with_cycle:?} -> {after:?}"
            );
        }
    }
    println!("PASS criterion 7: every cross-boundary cycle reclaimed within one refresh + collect + drain");
}

// ---- criterion 8: format round-trip ----------------------------------------------

/// Independent grammar oracle: balance counter over the unit alphabet.
fn grammar_oracle_accepts(s: &str) -> bool {
    let mut depth = 0i64;
    for b in s.bytes() {
        match b {
            b'i' | b'd' | b's' | b'O' => {}
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => return false,
        }
    }
    depth == 0
}

fn values_for_spec(source: &str, pool: &[NativeRef]) -> Vec<FormatValue> {
    let mut out = Vec::new();
    for (i, b) in source.bytes().enumerate() {
        match b {
            b'i' => out.push(FormatValue::Int(i as i64 * 3 - 7)),
            b'd' => out.push(FormatValue::Real(i as f64 + 0.5)),
            b's' => out.push(FormatValue::Bytes(format!("v{i}").into_bytes())),
            b'O' => out.push(FormatValue::Obj(pool[i % pool.len()])),
            _ => {}
        }
    }
    out
}

fn round_trip_case(w: &mut World, source: &str, pool: &[NativeRef]) {
    let spec = parse_format(source).unwrap();
    let values = values_for_spec(source, pool);
    assert_eq!(values.len(), spec.arity());
    let pool_counts: Vec<u64> = pool.iter().map(|&r| w.native.refcount(r)).collect();

    let built = build_value(w, &spec, &values).unwrap();
    // Single-leaf convention: unpacking always takes the argument tuple, so
    // wrap bare single-unit results.
    let tuple = if spec.units.len() == 1 {
        w.native.new_tuple(vec![built]).unwrap()
    } else {
        w.native.incref(built);
        built
    };
    let out = parse_args(w, &spec, tuple).unwrap();
    assert_eq!(out, values, "round trip diverged for '{source}'");
    for v in out {
        if let FormatValue::Obj(r) = v {
            w.native.decref(r);
        }
    }
    w.native.decref(tuple);
    w.native.decref(built);
    // Refcount neutrality for every O-passed object, exactly.
    let after: Vec<u64> = pool.iter().map(|&r| w.native.refcount(r)).collect();
    assert_eq!(pool_counts, after, "refcount drift for '{source}'");
}

#[test]
fn criterion_8_format_round_trip() {
    let rt = Runtime::new();
    let alphabet = [b'i', b'd', b's', b'O', b'(', b')'];

    let (exhaustive_total, exhaustive_valid) = rt.with_world(|w| {
        let pool: Vec<NativeRef> = (0..4)
            .map(|i| w.native.new_str(format!("obj{i}").into_bytes()).unwrap())
            .collect();
        let baseline_live = w.native.live_count();

        // Exhaustive sweep: every string over the alphabet up to length 8.
        let mut total = 0u64;
        let mut valid = 0u64;
        for len in 0..=8usize {
            let mut idx = vec![0usize; len];
            loop {
                let s: String = idx.iter().map(|&i| alphabet[i] as char).collect();
                total += 1;
                let parsed = parse_format(&s);
                assert_eq!(
                    parsed.is_ok(),
                    grammar_oracle_accepts(&s),
                    "grammar disagreement on '{s}'"
                );
                if parsed.is_ok() {
                    valid += 1;
                    round_trip_case(w, &s, &pool);
                    assert_eq!(w.native.live_count(), baseline_live, "leak after '{s}'");
                }
                // Odometer increment.
                let mut k = 0;
                loop {
                    if k == len {
                        break;
                    }
                    idx[k] += 1;
                    if idx[k] < alphabet.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == len {
                    break;
                }
            }
            if len == 0 {
                continue;
            }
        }
        for r in pool {
            w.native.decref(r);
        }
        (total, valid)
    });

    // Randomized deeper cases: well-formed specs to depth 3 / arity 6 and
    // slightly beyond the exhaustive length bound.
    let random_cases = 10_000usize;
    rt.with_world(|w| {
        let pool: Vec<NativeRef> = (0..4)
            .map(|i| w.native.new_str(format!("robj{i}").into_bytes()).unwrap())
            .collect();
        let mut rng = rng_for(8_000);
        for _ in 0..random_cases {
            let mut s = String::new();
            let arity = rng.gen_range(1..=6);
            let mut depth: u32 = 0;
            let mut leaves = 0;
            while leaves < arity {
                match rng.gen_range(0..8) {
                    0 if depth < 3 => {
                        s.push('(');
                        depth += 1;
                    }
                    1 if depth > 0 => {
                        s.push(')');
                        depth -= 1;
                    }
                    n => {
                        s.push([b'i', b'd', b's', b'O'][n % 4] as char);
                        leaves += 1;
                    }
                }
            }
            for _ in 0..depth {
                s.push(')');
            }
            round_trip_case(w, &s, &pool);
        }
        for r in pool {
            w.native.decref(r);
        }
    });
    println!(
        "PASS criterion 8: exhaustive sweep {exhaustive_valid}/{exhaustive_total} valid strings round-trip, plus {random_cases} randomized cases; refcount neutrality exact"
    );
}

// ---- criterion 9: golden scenario -------------------------------------------------

#[test]
fn criterion_9_golden_scenario() {
    let scenario = include_str!("../../rtbridge-cli/scenarios/demo.scn");
    let golden = include_str!("golden/demo.golden");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let rt = Runtime::new();
        let report = run_scenario(&rt, scenario, &ScenarioConfig::default()).unwrap();
        let mut text = report.output.join("\n");
        text.push('\n');
        outputs.push(text);
    }
    assert_eq!(outputs[0], outputs[1], "scenario output not reproducible");
    assert_eq!(outputs[0], golden, "scenario output diverged from golden");
    println!("PASS criterion 9: demo scenario output is byte-identical across runs and matches the golden file");
}

// ---- criterion 10: leak audit ------------------------------------------------------

#[test]
fn criterion_10_leak_audit() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../rtbridge-cli/scenarios");
    for file in ["demo.scn", "attrs.scn", "mirror.scn", "cycle.scn", "stress.scn"] {
        let rt = Runtime::new();
        let text = std::fs::read_to_string(format!("{dir}/{file}")).unwrap();
        let config = ScenarioConfig {
            base_dir: dir.into(),
            ..ScenarioConfig::default()
        };
        run_scenario(&rt, &text, &config).unwrap();
        rt.gc_full();
        let (live, oracle_count, internal_count) = rt.with_world(|w| {
            let (_, reach_n) = oracle_reachable(w);
            (
                w.native.live_count(),
                reach_n.len(),
                w.reachable_native_set().len(),
            )
        });
        assert_eq!(
            live, oracle_count,
            "leak in {file}: {live} live vs {oracle_count} reachable"
        );
        assert_eq!(oracle_count, internal_count, "audit disagreement in {file}");
    }
    println!("PASS criterion 10: arena live count equals oracle-reachable count after every scenario + full drain");
}
