use manet::taxonomy::{load_taxonomy, save_taxonomy, LabelTaxonomy, DEFAULT_TAXONOMY_JSON};

#[test]
fn shipped_taxonomy_covers_every_fine_label() {
    let tax = LabelTaxonomy::shipped();
    assert_eq!((tax.num_fine(), tax.num_coarse()), (52, 7));
    let mut per_group = vec![0; 7];
    for f in tax.fine() {
        per_group[tax.coarse_of(f.id).unwrap()] += 1;
    }
    assert!(per_group.iter().all(|&n| n > 0));
    assert_eq!(per_group.iter().sum::<usize>(), 52);
    assert!(tax.coarse_of(52).is_err());
    assert_eq!(tax, LabelTaxonomy::from_json_str(DEFAULT_TAXONOMY_JSON, "shipped").unwrap());
}

#[test]
fn save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    for tax in [LabelTaxonomy::shipped(), LabelTaxonomy::synthetic(6, 2).unwrap()] {
        save_taxonomy(&tax, &path).unwrap();
        assert_eq!(load_taxonomy(&path).unwrap(), tax);
    }
    std::fs::write(&path, "{ not json").unwrap();
    assert!(load_taxonomy(&path).is_err());
    assert!(load_taxonomy(dir.path().join("missing.json")).is_err());
}

#[test]
fn synthetic_taxonomy_rejects_impossible_shapes() {
    assert!(LabelTaxonomy::synthetic(2, 3).is_err());
    assert!(LabelTaxonomy::synthetic(4, 0).is_err());
    let t = LabelTaxonomy::synthetic(7, 3).unwrap();
    let groups: Vec<usize> = (0..7).map(|f| t.coarse_of(f).unwrap()).collect();
    assert!(groups.windows(2).all(|w| w[0] <= w[1]));
}
