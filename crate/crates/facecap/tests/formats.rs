use facecap::cache::{read_cache, write_cache, CacheError};
use facecap::formats::*;
use facecap_core::assets::{generate, AssetSpec};
use facecap_core::geometry::Vec3;
use facecap_core::imaging::Image;

#[test]
fn asset_round_trips_through_files() {
    let t = tempfile::tempdir().unwrap();
    let asset = generate(&AssetSpec::default()).unwrap();
    write_asset(t.path(), &asset).unwrap();
    let back = read_asset(t.path()).unwrap();
    assert_eq!(back.flesh, asset.flesh);
    assert_eq!(back.rig, asset.rig);
    assert_eq!(back.muscles, asset.muscles);
    assert_eq!(back.proxies, asset.proxies);
    assert_eq!(back.camera, asset.camera);
    assert_eq!(back.constrained, asset.constrained);
    assert_eq!(back.lip_region, asset.lip_region);
    assert_eq!(back.plates.roto, asset.plates.roto);
    assert_eq!(back.plates.gamma, asset.plates.gamma);
    // Plates are quantized to 16 bits.
    for (p, q) in back
        .plates
        .expression
        .data
        .iter()
        .zip(&asset.plates.expression.data)
    {
        assert!((p - q).amax() <= 0.5 / 65535.0 + 1e-12);
    }
}

#[test]
fn obj_round_trip_is_lossless() {
    let t = tempfile::tempdir().unwrap();
    let pts = vec![
        Vec3::new(0.1 + 0.2, -1e-300, std::f64::consts::PI),
        Vec3::new(1.0 / 3.0, 2.0f64.sqrt(), -0.0),
        Vec3::new(1e17, 5e-324, 0.7),
    ];
    let tris = vec![[0, 1, 2]];
    let path = t.path().join("m.obj");
    write_obj(&path, &pts, &tris).unwrap();
    let (p2, t2) = read_obj(&path).unwrap();
    assert_eq!(t2, tris);
    for (a, b) in pts.iter().zip(&p2) {
        for k in 0..3 {
            assert_eq!(a[k].to_bits(), b[k].to_bits());
        }
    }
}

#[test]
fn obj_rejects_malformed_faces() {
    let t = tempfile::tempdir().unwrap();
    let path = t.path().join("m.obj");
    std::fs::write(&path, "v 0 0 0\nv 1 0 0\nf 1 2 3\n").unwrap();
    assert!(read_obj(&path).is_err());
    std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2\n").unwrap();
    assert!(read_obj(&path).is_err());
}

#[test]
fn png_round_trip_within_quantization() {
    let t = tempfile::tempdir().unwrap();
    let data = (0..12)
        .map(|i| Vec3::new(i as f64 / 11.0, 0.5, 1.0 - i as f64 / 11.0))
        .collect();
    let img = Image::new(4, 3, data).unwrap();
    let path = t.path().join("p.png");
    write_png(&path, &img).unwrap();
    let back = read_png(&path).unwrap();
    assert_eq!((back.width, back.height), (4, 3));
    for (a, b) in img.data.iter().zip(&back.data) {
        assert!((a - b).amax() <= 0.5 / 65535.0 + 1e-12);
    }
}

#[test]
fn cache_round_trip_equals_fresh_precompute() {
    let t = tempfile::tempdir().unwrap();
    let asset = generate(&AssetSpec {
        seed: 11,
        ..AssetSpec::default()
    })
    .unwrap();
    write_asset(t.path(), &asset).unwrap();
    let loaded = read_asset(t.path()).unwrap();
    let hash = asset_hash(t.path()).unwrap();
    let basis = loaded.precompute().unwrap();
    write_cache(t.path(), &hash, &basis).unwrap();
    assert_eq!(read_cache(t.path(), &loaded, &hash).unwrap(), basis);
    assert!(matches!(
        read_cache(t.path(), &loaded, "other"),
        Err(CacheError::Stale { .. })
    ));
    std::fs::remove_file(t.path().join("basis.json")).unwrap();
    assert!(matches!(
        read_cache(t.path(), &loaded, &hash),
        Err(CacheError::Missing(_))
    ));
}

#[test]
fn unknown_keys_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    let asset = generate(&AssetSpec::default()).unwrap();
    write_asset(t.path(), &asset).unwrap();
    let path = t.path().join(ASSET_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(
        &path,
        text.replacen("\"format\"", "\"extra\": 1, \"format\"", 1),
    )
    .unwrap();
    assert!(matches!(
        read_asset(t.path()),
        Err(FormatError::Json { .. })
    ));
}
