use std::collections::BTreeMap;

use skillrec::synth::{generate, SynthConfig};
use skillrec::tensor::cosine;

/// Mid-ranks, 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn clicks_rise_with_job_user_cosine() {
    let (ds, truth) = generate(&SynthConfig::default()).unwrap();
    let latent: BTreeMap<&str, &[f64]> = truth.jds.iter().map(|j| (j.jd_id.as_str(), j.latent.as_slice())).collect();
    let users = ds.user_index();
    let mut cos = Vec::new();
    let mut label = Vec::new();
    for c in &ds.clicks {
        let u = &ds.users[users[c.user_id.as_str()]].profile;
        cos.push(cosine(latent[c.jd_id.as_str()], &u.skills.probs));
        label.push(f64::from(c.label));
    }
    assert!(cos.len() >= 10_000, "only {} draws", cos.len());
    let rho = pearson(&ranks(&cos), &ranks(&label));
    let n = cos.len() as f64;
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    // One-sided 99% critical value of the normal approximation.
    assert!(t > 2.326, "spearman {rho:.4}, t = {t:.2}");

    // Click rate over cosine quintiles never drops.
    let mut order: Vec<usize> = (0..cos.len()).collect();
    order.sort_by(|&a, &b| cos[a].total_cmp(&cos[b]));
    let rates: Vec<f64> = order
        .chunks(order.len() / 5)
        .map(|c| c.iter().map(|&i| label[i]).sum::<f64>() / c.len() as f64)
        .collect();
    assert!(rates.windows(2).all(|w| w[1] >= w[0] - 0.01), "{rates:?}");
}

#[test]
fn hotter_temperature_sharpens_clicks() {
    let rate_gap = |temp: f64| {
        let cfg = SynthConfig {
            num_jds: 400,
            num_users: 400,
            click_temperature: temp,
            ..SynthConfig::default()
        };
        let (ds, truth) = generate(&cfg).unwrap();
        let users = ds.user_index();
        let jds = ds.jd_index();
        let (mut hi, mut lo) = ((0.0, 0.0), (0.0, 0.0));
        for c in &ds.clicks {
            let j = &truth.jds[jds[c.jd_id.as_str()]];
            let u = &ds.users[users[c.user_id.as_str()]].profile;
            let bucket = if cosine(&j.latent, &u.skills.probs) > truth.click_mean_cosine {
                &mut hi
            } else {
                &mut lo
            };
            bucket.0 += f64::from(c.label);
            bucket.1 += 1.0;
        }
        hi.0 / hi.1 - lo.0 / lo.1
    };
    assert!(rate_gap(12.0) > rate_gap(1.0));
}
