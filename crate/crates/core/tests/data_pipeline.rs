//! Attribute-list ingestion and image preprocessing on constructed inputs.

use itgan_core::data::{
    center_crop, parse_attr_list, preprocess, CelebaDataset, Dataset, RawImage, CELEBA_MIN_SIDE,
};
use itgan_core::error::Error;
use itgan_core::pipeline::write_png;

const TOL: f64 = 1e-6;
const FIXTURE: &str = include_str!("fixtures/list_attr_100.txt");

/// Rows as plain token lists, read without the parser.
fn tokens() -> Vec<Vec<&'static str>> {
    FIXTURE.lines().skip(2).map(|l| l.split_whitespace().collect()).collect()
}

#[cfg_attr(not(itgan_acceptance), test)]
pub fn fixture_parses_with_sign_mapping() {
    let list = parse_attr_list(FIXTURE).unwrap();
    assert_eq!(list.names.len(), 40);
    assert_eq!(list.names[15], "Eyeglasses");
    assert_eq!(list.rows.len(), 100);
    for (row, toks) in list.rows.iter().zip(tokens()) {
        assert_eq!(row.file, toks[0]);
        for (&v, t) in row.values.iter().zip(&toks[1..]) {
            assert_eq!(v, *t == "1");
        }
    }
    // Column totals, counted straight from the text.
    for j in 0..40 {
        let want = tokens().iter().filter(|t| t[j + 1] == "1").count();
        assert_eq!(list.rows.iter().filter(|r| r.values[j]).count(), want);
    }
}

#[cfg_attr(not(itgan_acceptance), test)]
pub fn fixture_round_trips() {
    let list = parse_attr_list(FIXTURE).unwrap();
    assert_eq!(list.to_text(), FIXTURE);
    assert_eq!(parse_attr_list(&list.to_text()).unwrap(), list);
}

fn replace_line(n: usize, f: impl Fn(&str) -> String) -> String {
    FIXTURE
        .lines()
        .enumerate()
        .map(|(i, l)| if i + 1 == n { f(l) } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg_attr(not(itgan_acceptance), test)]
pub fn malformed_rows_are_rejected_with_their_line() {
    let zero = replace_line(40, |l| l.replacen(" -1", " 0", 1).replacen(" 1", " 0", 1));
    let short = replace_line(57, |l| l.rsplit_once(' ').unwrap().0.to_string());
    let long = replace_line(102, |l| format!("{l} 1"));
    let word = replace_line(3, |l| l.replacen(" 1", " yes", 1).replacen(" -1", " yes", 1));
    for (text, line) in [(zero, 40), (short, 57), (long, 102), (word, 3)] {
        match parse_attr_list(&text) {
            Err(Error::Parse { line: got, .. }) => assert_eq!(got, line),
            other => panic!("line {line}: unexpected {other:?}"),
        }
    }
}

#[cfg_attr(not(itgan_acceptance), test)]
pub fn malformed_headers_are_rejected() {
    let count = replace_line(1, |_| "101".into());
    assert!(matches!(parse_attr_list(&count), Err(Error::Format(_))));
    let names = replace_line(2, |l| l.rsplit_once(' ').unwrap().0.to_string());
    assert!(matches!(parse_attr_list(&names), Err(Error::Format(_))));
    let junk = replace_line(1, |_| "one hundred".into());
    assert!(matches!(parse_attr_list(&junk), Err(Error::Parse { line: 1, .. })));
}

/// A 178×218 frame whose red channel is the column, green the row within
/// the centred square, and blue the raw row.
fn ramp() -> RawImage {
    RawImage::from_fn(178, 218, |x, y| [x as u8, y.saturating_sub(20).min(177) as u8, (y / 2) as u8])
}

fn px(t: &itgan_core::Tensor<f32>, s: usize, k: usize, y: usize, x: usize) -> f64 {
    t.data()[(k * s + y) * s + x] as f64
}

#[cfg_attr(not(itgan_acceptance), test)]
pub fn crop_keeps_the_middle_square() {
    let sq = center_crop(&ramp());
    assert_eq!((sq.width, sq.height), (178, 178));
    for y in [0usize, 1, 88, 177] {
        for x in [0usize, 90, 177] {
            let i = (y * 178 + x) * 3;
            assert_eq!(&sq.data[i..i + 3], &[x as u8, y as u8, ((y + 20) / 2) as u8]);
        }
    }
}

#[cfg_attr(not(itgan_acceptance), test)]
pub fn native_size_is_a_pure_rescale() {
    let img = ramp();
    let t = preprocess(&img, 178, CELEBA_MIN_SIDE).unwrap();
    assert_eq!(t.shape(), &[3, 178, 178]);
    for y in 0..178 {
        for x in 0..178 {
            for k in 0..3 {
                let b = img.data[((y + 20) * 178 + x) * 3 + k] as f64;
                assert!((px(&t, 178, k, y, x) - (b / 127.5 - 1.0)).abs() < TOL);
            }
        }
    }
}

/// Bilinear sampling reproduces an affine ramp exactly, so every output
/// pixel sits at its half-pixel-centred source coordinate.
#[cfg_attr(not(itgan_acceptance), test)]
pub fn resize_tracks_source_coordinates() {
    let img = ramp();
    for s in [32usize, 64, 128] {
        let t = preprocess(&img, s, CELEBA_MIN_SIDE).unwrap();
        assert_eq!(t.shape(), &[3, s, s]);
        let src = |o: usize| ((o as f64 + 0.5) * 178.0 / s as f64 - 0.5).clamp(0.0, 177.0);
        for y in 0..s {
            for x in 0..s {
                assert!((px(&t, s, 0, y, x) - (src(x) / 127.5 - 1.0)).abs() < TOL, "s={s} ({x},{y})");
                assert!((px(&t, s, 1, y, x) - (src(y) / 127.5 - 1.0)).abs() < TOL, "s={s} ({x},{y})");
            }
        }
    }
}

/// Halving lands every sample between four source pixels: a 2×2 mean.
#[cfg_attr(not(itgan_acceptance), test)]
pub fn halving_is_a_box_filter() {
    let img = RawImage::from_fn(178, 218, |x, y| {
        let h = (x * 7919 + y * 104_729) % 251;
        [h as u8, (255 - h) as u8, ((x ^ y) & 0xff) as u8]
    });
    let t = preprocess(&img, 89, CELEBA_MIN_SIDE).unwrap();
    for y in 0..89 {
        for x in 0..89 {
            for k in 0..3 {
                let at = |xx: usize, yy: usize| img.data[((yy + 20) * 178 + xx) * 3 + k] as f64;
                let mean = (at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1)) / 4.0;
                assert!((px(&t, 89, k, y, x) - (mean / 127.5 - 1.0)).abs() < TOL);
            }
        }
    }
}

#[cfg_attr(not(itgan_acceptance), test)]
pub fn dataset_reads_the_fixture_folder() {
    let dir = tempfile::tempdir().unwrap();
    let list = parse_attr_list(FIXTURE).unwrap();
    // Only the first three frames exist on disk.
    for row in &list.rows[..3] {
        write_png(&ramp(), &dir.path().join(&row.file)).unwrap();
    }
    let attr = dir.path().join("list_attr_celeba.txt");
    std::fs::write(&attr, FIXTURE).unwrap();
    let ds = CelebaDataset::open(dir.path(), &attr, 32).unwrap();
    assert_eq!((ds.len(), ds.missing()), (3, 97));
    let item = ds.get(1).unwrap();
    assert_eq!(item.id, list.rows[1].file);
    assert_eq!(item.attrs, list.rows[1].values);
    assert_eq!(item.pixels, preprocess(&ramp(), 32, CELEBA_MIN_SIDE).unwrap());
    let (x, c) = ds.batch(&[0, 2]).unwrap();
    assert_eq!((x.shape(), c.shape()), (&[2usize, 3, 32, 32][..], &[2usize, 40][..]));
    assert_eq!(c.data()[40 + 15], if list.rows[2].values[15] { 1.0 } else { 0.0 });
}
