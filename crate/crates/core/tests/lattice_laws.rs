use std::collections::BTreeSet;

use labelprop::lattice::{hasse_edges, is_antichain, Label, Lattice, LatticeSpec, RealizedLattice};
use proptest::prelude::*;

fn product() -> Lattice {
    Lattice::from_toml(
        r#"
kind = "product"
[[dimensions]]
name = "conf"
kind = "atomset"
atoms = ["a", "b", "c"]
[[dimensions]]
name = "integ"
kind = "total-order"
levels = ["Lo", "Mid", "Hi"]
"#,
    )
    .unwrap()
}

fn atoms(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

fn atom_label(mask: u32, n: usize) -> Label {
    Label::atoms(atoms(n).into_iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, a)| a))
}

proptest! {
    #[test]
    fn product_lattice_laws(i in 0usize..24, j in 0usize..24, k in 0usize..24) {
        let lat = product();
        let el = lat.elements(1000).unwrap();
        prop_assert_eq!(el.len(), 24);
        let (a, b, c) = (&el[i], &el[j], &el[k]);
        let j_ab = lat.join(a, b).unwrap();
        let m_ab = lat.meet(a, b).unwrap();
        prop_assert_eq!(&j_ab, &lat.join(b, a).unwrap());
        prop_assert_eq!(&m_ab, &lat.meet(b, a).unwrap());
        prop_assert_eq!(lat.join(&j_ab, c).unwrap(), lat.join(a, &lat.join(b, c).unwrap()).unwrap());
        prop_assert_eq!(lat.meet(&m_ab, c).unwrap(), lat.meet(a, &lat.meet(b, c).unwrap()).unwrap());
        prop_assert_eq!(&lat.join(a, &lat.meet(a, b).unwrap()).unwrap(), a);
        prop_assert_eq!(&lat.meet(a, &lat.join(a, b).unwrap()).unwrap(), a);
        prop_assert_eq!(&lat.join(a, a).unwrap(), a);
        prop_assert_eq!(lat.leq(a, b).unwrap(), &j_ab == b);
        prop_assert_eq!(lat.leq(a, b).unwrap(), &m_ab == a);
        prop_assert!(lat.leq(&lat.bottom(), a).unwrap() && lat.leq(a, &lat.top()).unwrap());
        prop_assert!(lat.leq(a, &j_ab).unwrap() && lat.leq(&m_ab, a).unwrap());
        if lat.leq(a, b).unwrap() && lat.leq(b, a).unwrap() {
            prop_assert_eq!(a, b);
        }
        if lat.leq(a, b).unwrap() && lat.leq(b, c).unwrap() {
            prop_assert!(lat.leq(a, c).unwrap());
        }
        // greatest lower bound: any common lower bound is below the meet
        for d in &el {
            if lat.leq(d, a).unwrap() && lat.leq(d, b).unwrap() {
                prop_assert!(lat.leq(d, &m_ab).unwrap());
            }
            if lat.leq(a, d).unwrap() && lat.leq(b, d).unwrap() {
                prop_assert!(lat.leq(&j_ab, d).unwrap());
            }
        }
    }

    #[test]
    fn labels_round_trip_through_text(i in 0usize..24) {
        let lat = product();
        let l = &lat.elements(1000).unwrap()[i];
        prop_assert_eq!(&lat.parse_label(&l.to_string()).unwrap(), l);
    }

    #[test]
    fn realized_lattice_matches_naive_closure(masks in prop::collection::btree_set(1u32..64, 1..7)) {
        let gens: Vec<Label> = masks.iter().map(|&m| atom_label(m, 6)).collect();
        let rl = RealizedLattice::build(&gens, 16).unwrap();

        let mut closure: BTreeSet<u32> = masks.clone();
        loop {
            let next: BTreeSet<u32> = closure.iter().flat_map(|a| closure.iter().map(move |b| a | b)).collect();
            if next == closure {
                break;
            }
            closure = next;
        }
        let expected: BTreeSet<String> = closure.iter().map(|&m| atom_label(m, 6).to_string()).collect();
        let got: BTreeSet<String> = rl.nodes().iter().map(Label::to_string).collect();
        prop_assert_eq!(&got, &expected);
        prop_assert_eq!(rl.top_label(), &atom_label(masks.iter().fold(0, |a, b| a | b), 6));

        let mut fast: Vec<(usize, usize)> = rl.hasse_edges();
        let mut slow = hasse_edges(rl.nodes()).unwrap();
        fast.sort();
        slow.sort();
        prop_assert_eq!(fast, slow);

        for i in 0..rl.len() {
            let kids: Vec<Label> = rl.children_of(i).iter().map(|&c| rl.label(c).clone()).collect();
            prop_assert!(is_antichain(&kids).unwrap());
            for j in 0..rl.len() {
                prop_assert_eq!(rl.leq_nodes(i, j), rl.label(i).leq(rl.label(j)).unwrap());
            }
        }
        for g in &gens {
            prop_assert!(rl.generator_index(g).is_some());
        }
    }

    #[test]
    fn total_order_closure_is_the_chain(levels in prop::collection::btree_set(0usize..6, 1..6)) {
        let names: Vec<String> = (0..6).map(|i| format!("L{i}")).collect();
        let lat = Lattice::new(LatticeSpec::TotalOrder { levels: names.clone() }).unwrap();
        let gens: Vec<Label> = levels.iter().map(|&i| lat.level(&names[i]).unwrap()).collect();
        let rl = RealizedLattice::build(&gens, 16).unwrap();
        prop_assert_eq!(rl.len(), levels.len());
        prop_assert_eq!(rl.hasse_edges().len(), levels.len() - 1);
        prop_assert_eq!(rl.top_label().to_string(), names[*levels.iter().max().unwrap()].clone());
    }
}

#[test]
fn capacity_is_enforced() {
    let gens: Vec<Label> = (0..17).map(|i| Label::atoms([format!("d{i}")])).collect();
    assert!(RealizedLattice::build(&gens, 16).is_err());
    assert_eq!(RealizedLattice::build(&gens[..4], 16).unwrap().len(), 15);
}
