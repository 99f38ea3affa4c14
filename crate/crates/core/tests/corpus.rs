use saml::dataset::{load_corpus, write_corpus, CellClass, Corpus, InstanceMask, Modality, Patch, Stratum};
use saml::BoolGrid;
use saml::Grid;

#[test]
fn counts_patches_per_class_after_round_trip() {
    // 1147 podocyte patches and 789 mesangial patches, no patch with both
    let mut patches = Vec::new();
    let mut instances = Vec::new();
    for i in 0..1936 {
        let id = format!("p{i:04}");
        let class = if i < 1147 { CellClass::Podocyte } else { CellClass::Mesangial };
        patches.push(Patch {
            patch_id: id.clone(),
            image: Grid::filled(4, 4, [200, 180, 200]),
            modality: Modality::Pas,
            stratum: if i % 3 == 0 { Stratum::Injured } else { Stratum::Normal },
            source_wsi: "w".into(),
            annotator_id: "a".into(),
        });
        let mask = BoolGrid::from_fn(4, 4, |r, c| r == 1 && c < 3);
        instances.push(InstanceMask::new("i0", id, class, mask).unwrap());
    }
    let corpus = Corpus::new(patches, instances, Default::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    let counts = back.counts();
    assert_eq!(counts.patches, 1936);
    assert_eq!(counts.patches_with_class[&CellClass::Podocyte], 1147);
    assert_eq!(counts.patches_with_class[&CellClass::Mesangial], 789);
    assert_eq!(back, corpus);
}
