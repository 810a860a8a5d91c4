use partseg::taxonomy::{
    builtin_names, format_category, parse_category, Taxonomy, TaxonomyFile, ADE20K_PART_234, PASCAL_PART_116,
};
use partseg::model::ChannelLayout;
use partseg::Error;
use proptest::prelude::*;

#[test]
fn builtin_tables_have_expected_sizes() {
    let p = Taxonomy::pascal_part_116();
    assert_eq!(p.num_pairs(), 116);
    assert_eq!(p.num_objects(), 16);
    let a = Taxonomy::ade20k_part_234();
    assert_eq!(a.num_pairs(), 234);
    assert_eq!(a.num_objects(), 44);
    assert!(p.validate().is_ok() && a.validate().is_ok());
}

#[test]
fn multiword_names_split_on_last_possessive() {
    assert_eq!(parse_category("chest of drawers's drawer").unwrap(), ("chest of drawers".into(), "drawer".into()));
    assert_eq!(parse_category("person's lower arm").unwrap(), ("person".into(), "lower arm".into()));
    assert_eq!(parse_category("a's b's c").unwrap(), ("a's b".into(), "c".into()));
}

#[test]
fn builtin_names_round_trip() {
    for table in [PASCAL_PART_116, ADE20K_PART_234] {
        for name in builtin_names(table) {
            let (o, p) = parse_category(&name).unwrap();
            assert_eq!(format_category(&o, &p), name);
        }
    }
}

#[test]
fn malformed_and_duplicate_names_are_rejected() {
    for bad in ["dog head", "'s head", "dog's ", "dog's"] {
        assert!(matches!(parse_category(bad), Err(Error::MalformedCategoryName(_))), "{bad}");
    }
    assert!(matches!(Taxonomy::build(&["a's x", "a's x"], &[]), Err(Error::DuplicateCategory(_))));
    assert!(matches!(Taxonomy::build(&["a's x"], &["b"]), Err(Error::UnknownUnseenObject(_))));
    let empty: [&str; 0] = [];
    assert!(matches!(Taxonomy::build(&empty, &empty), Err(Error::EmptyCategoryList)));
}

#[test]
fn seen_only_drops_unseen_pairs() {
    let t = Taxonomy::pascal_part_116();
    let (seen, remap) = t.seen_only();
    let (s, u) = t.split_indices();
    assert_eq!(seen.num_pairs(), s.len());
    assert_eq!(s.len() + u.len(), 116);
    for (k, r) in remap.iter().enumerate() {
        match r {
            Some(j) => assert_eq!(seen.obj_part_names()[*j], t.obj_part_names()[k]),
            None => assert!(t.is_unseen_pair(k)),
        }
    }
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn object_name() -> impl Strategy<Value = String> {
    (word(), proptest::option::of(word()), proptest::option::of(word())).prop_map(|(a, b, c)| {
        let mut s = a;
        if let Some(b) = b {
            s = format!("{s} {b}");
        }
        if let Some(c) = c {
            s = format!("{s}'s {c}");
        }
        s
    })
}

fn part_name() -> impl Strategy<Value = String> {
    (word(), proptest::option::of(word())).prop_map(|(a, b)| match b {
        Some(b) => format!("{a} {b}"),
        None => a,
    })
}

proptest! {
    #[test]
    fn parse_format_round_trip(o in object_name(), p in part_name()) {
        let name = format_category(&o, &p);
        prop_assert_eq!(parse_category(&name).unwrap(), (o, p));
    }

    #[test]
    fn built_taxonomy_is_consistent(
        pairs in proptest::collection::btree_set((0usize..5, 0usize..6), 1..20),
        unseen_mask in proptest::collection::vec(any::<bool>(), 5),
    ) {
        let names: Vec<String> = pairs.iter().map(|&(o, p)| format_category(&format!("obj{o}"), &format!("part{p}"))).collect();
        let objects: Vec<String> = {
            let mut v = Vec::new();
            for &(o, _) in &pairs {
                let n = format!("obj{o}");
                if !v.contains(&n) { v.push(n); }
            }
            v
        };
        let unseen: Vec<String> = objects.iter().enumerate().filter(|(i, _)| unseen_mask[*i]).map(|(_, o)| o.clone()).collect();
        let t = Taxonomy::build(&names, &unseen).unwrap();
        prop_assert!(t.validate().is_ok());
        prop_assert_eq!(t.objects(), &objects[..]);
        prop_assert_eq!(t.obj_part_names(), &names[..]);
        let layout = ChannelLayout::for_taxonomy(&t);
        prop_assert_eq!(layout.total(), t.num_pairs() + t.num_objects() + t.num_parts() + 2);
        let distinct_parts: std::collections::BTreeSet<usize> = pairs.iter().map(|&(_, p)| p).collect();
        prop_assert_eq!(t.num_parts(), distinct_parts.len());
        for k in 0..t.num_pairs() {
            let (o, p) = t.pair(k);
            prop_assert_eq!(format_category(&t.objects()[o], &t.parts()[p]), names[k].clone());
            prop_assert!(t.parts_of_object(o).unwrap().contains(&k));
        }
        let file = t.to_file();
        let back = Taxonomy::from_file(&TaxonomyFile { categories: file.categories.clone(), unseen_objects: file.unseen_objects.clone() }).unwrap();
        prop_assert_eq!(back, t);
    }
}
