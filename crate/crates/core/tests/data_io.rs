use std::fs;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use lisn::data::{load_image, save_image, Dataset};
use lisn::{Error, Tensor};
use tempfile::TempDir;

fn ramp(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| ((y * w + x) % 97) as f32 / 96.0)
}

#[test]
fn png_and_pgm_round_trip_within_quantization() {
    let tmp = TempDir::new().unwrap();
    let img = ramp(13, 17);
    for ext in ["png", "pgm"] {
        let path = tmp.path().join(format!("ramp.{ext}"));
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.hr.shape(), img.shape(), "{ext}");
        assert!(back.hr.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-7, "{ext}");
        assert_eq!((back.height(), back.width()), (13, 17));
    }
}

#[test]
fn extremes_are_exact() {
    let tmp = TempDir::new().unwrap();
    for v in [0.0f32, 1.0] {
        let path = tmp.path().join(format!("c{v}.png"));
        save_image(&Tensor::full(&[1, 1, 4, 5], v), &path).unwrap();
        assert!(load_image(&path).unwrap().hr.data().iter().all(|&p| p == v));
    }
}

#[test]
fn save_clamps_out_of_range_values() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("clamp.png");
    let img = Tensor::new(vec![1, 1, 1, 3], vec![-0.5f32, 0.5, 1.5]).unwrap();
    save_image(&img, &path).unwrap();
    let back = image::open(&path).unwrap().into_luma8();
    assert_eq!(back.into_raw(), [0, 128, 255]);
}

#[test]
fn rgb_is_converted_to_luma() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("rgb.png");
    let img: RgbImage = ImageBuffer::from_fn(2, 1, |x, _| if x == 0 { Rgb([255, 0, 0]) } else { Rgb([0, 0, 255]) });
    img.save(&path).unwrap();
    let t = load_image(&path).unwrap().hr;
    assert_eq!(t.shape(), [1, 1, 1, 2]);
    assert!((t.data()[0] - 0.299).abs() < 1e-3, "{}", t.data()[0]);
    assert!((t.data()[1] - 0.114).abs() < 1e-3, "{}", t.data()[1]);
}

#[test]
fn sixteen_bit_images_use_full_range() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("deep.png");
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(3, 1, vec![0, 32768, 65535]).unwrap();
    img.save(&path).unwrap();
    let t = load_image(&path).unwrap().hr;
    let want = [0.0, 32768.0 / 65535.0, 1.0];
    for (g, w) in t.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn unreadable_files_name_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.png");
    let err = load_image(&missing).unwrap_err();
    assert!(err.to_string().contains("nope.png"), "{err}");

    let garbage = tmp.path().join("garbage.png");
    fs::write(&garbage, b"not an image").unwrap();
    let err = load_image(&garbage).unwrap_err();
    assert!(matches!(err, Error::Image { .. } | Error::Io { .. }), "{err}");
    assert!(err.to_string().contains("garbage.png"), "{err}");
}

#[test]
fn directory_listing_is_sorted_and_filtered() {
    let tmp = TempDir::new().unwrap();
    let sub = tmp.path().join("sub");
    fs::create_dir_all(&sub).unwrap();
    for name in ["b.png", "a.png", "sub/c.pgm"] {
        save_image(&ramp(4, 4), tmp.path().join(name)).unwrap();
    }
    fs::write(tmp.path().join("notes.txt"), "ignored").unwrap();
    let ds = Dataset::from_dir(tmp.path()).unwrap();
    let names: Vec<String> = ds
        .samples
        .iter()
        .map(|s| s.path.strip_prefix(tmp.path()).unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.png", "b.png", "sub/c.pgm"]);
}

#[test]
fn manifest_paths_are_relative_to_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let imgs = tmp.path().join("imgs");
    fs::create_dir_all(&imgs).unwrap();
    let g: GrayImage = ImageBuffer::from_pixel(6, 6, Luma([40]));
    g.save(imgs.join("x.png")).unwrap();
    let manifest = tmp.path().join("list.txt");
    fs::write(&manifest, "# training list\n\nimgs/x.png\n").unwrap();
    let ds = Dataset::open(&manifest).unwrap();
    assert_eq!(ds.len(), 1);
    assert!((ds.samples[0].hr.data()[0] - 40.0 / 255.0).abs() < 1e-6);
}

#[test]
fn empty_sources_are_errors() {
    let tmp = TempDir::new().unwrap();
    assert!(matches!(Dataset::from_dir(tmp.path()), Err(Error::Empty(_))));
    let manifest = tmp.path().join("list.txt");
    fs::write(&manifest, "# nothing\n").unwrap();
    assert!(matches!(Dataset::from_manifest(&manifest), Err(Error::Empty(_))));
    let bad = tmp.path().join("list2.txt");
    fs::write(&bad, "missing.png\n").unwrap();
    let err = Dataset::open(&bad).unwrap_err();
    assert!(err.to_string().contains("missing.png"), "{err}");
}
