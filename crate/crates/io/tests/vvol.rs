use comma_core::volume::{BinaryMask3D, Volume};
use comma_io::vvol::*;
use comma_io::IoError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(ext: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ext.iter().product();
    Volume::new(ext, (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap()
}

#[test]
fn header_and_first_axis_fastest_layout() {
    // 2x3x1 volume with value 10*i + j at (i, j, 0)
    let v = Volume::new([2, 3, 1], vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
    let bytes = encode_volume(&v);
    assert_eq!(&bytes[..8], b"VVOL0001");
    assert_eq!(&bytes[8..12], &[0, 0, 0, 0]);
    assert_eq!(&bytes[12..24], &[2, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0]);
    let values: Vec<f32> = bytes[24..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(values, [0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);

    let m = BinaryMask3D::from_fn([2, 1, 2], |i, _, k| i == 1 && k == 0);
    let bytes = encode_mask(&m);
    assert_eq!(bytes[8], 1);
    assert_eq!(&bytes[24..], &[0, 1, 0, 0]);
}

#[test]
fn roundtrip_is_bitwise() {
    let mut v = random_volume([5, 7, 3], 1);
    v.data_mut()[4] = f32::from_bits(0x7fc0_1234);
    v.data_mut()[5] = -0.0;
    match decode(&encode_volume(&v)).unwrap() {
        VolumeFile::Real(back) => {
            let bits = |x: &Volume| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(back.extents(), v.extents());
            assert_eq!(bits(&back), bits(&v));
        }
        other => panic!("{other:?}"),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = BinaryMask3D::from_fn([4, 6, 5], |_, _, _| rng.gen_bool(0.3));
    assert_eq!(decode(&encode_mask(&m)).unwrap(), VolumeFile::Binary(m));
}

#[test]
fn files_roundtrip_and_check_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let (vp, mp) = (dir.path().join("v.vvol"), dir.path().join("m.vvol"));
    let v = random_volume([3, 4, 5], 3);
    let m = v.threshold(0.0);
    write_volume(&vp, &v).unwrap();
    write_mask(&mp, &m).unwrap();
    assert_eq!(read_volume(&vp).unwrap(), v);
    assert_eq!(read_mask(&mp).unwrap(), m);
    let err = read_mask(&vp).unwrap_err();
    assert!(matches!(err.root(), IoError::WrongDtype { expected: "binary", .. }));
    assert!(err.to_string().contains("v.vvol"));
}

#[test]
fn malformed_files_report_byte_offsets() {
    let good = encode_volume(&random_volume([2, 2, 2], 4));

    let mut bad = good.clone();
    bad[3] = b'X';
    assert!(matches!(decode(&bad), Err(IoError::BadMagic { offset: 0, .. })));

    let mut bad = good.clone();
    bad[8] = 7;
    assert!(matches!(decode(&bad), Err(IoError::UnknownDtype { offset: 8, value: 7 })));

    match decode(&good[..30]) {
        Err(IoError::Truncated { expected, actual, .. }) => assert_eq!((expected, actual), (24 + 32, 30)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(decode(&good[..10]), Err(IoError::Truncated { expected: 24, actual: 10, .. })));

    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode(&long), Err(IoError::Trailing { offset: 56, extra: 1 })));

    let mut m = encode_mask(&BinaryMask3D::zeros([2, 2, 1]));
    m[26] = 2;
    assert!(matches!(decode(&m), Err(IoError::InvalidValue { offset: 26, .. })));

    let err = decode(&good[..30]).unwrap_err().to_string();
    assert!(err.contains("56") && err.contains("30"), "{err}");
}

#[test]
fn missing_file_names_the_path() {
    let err = read_file(std::path::Path::new("/nonexistent/x.vvol")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.vvol"));
    assert_eq!(err.exit_code(), 2);
}
