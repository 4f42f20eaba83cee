use semloc::ClassPalette;
use semloc_bench::{model_and_inputs, random_mask, street_panorama, unit_embeddings};

#[test]
fn fixtures_are_seeded_and_well_formed() {
    let p = ClassPalette::street();
    assert_eq!(random_mask(8, 6, &p, 1).unwrap(), random_mask(8, 6, &p, 1).unwrap());
    assert_ne!(random_mask(8, 6, &p, 1).unwrap(), random_mask(8, 6, &p, 2).unwrap());

    let pano = street_panorama(3).unwrap();
    assert_eq!(pano.mask.width(), 2 * pano.mask.height());

    let (model, inputs) = model_and_inputs(4, 5).unwrap();
    assert_eq!(inputs.len(), 4);
    assert!(model.forward(&inputs[0]).is_ok());

    for z in unit_embeddings(6, 16, 7) {
        assert!((z.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
