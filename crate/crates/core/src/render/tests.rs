use super::*;
use crate::math::{self, IDENTITY3};
use crate::scene::{init_random_cloud, Aabb, Camera};

fn camera() -> Camera {
    Camera::new(20.0, 20.0, 2.5, 2.5, IDENTITY3, [0.0; 3], 5, 5).unwrap()
}

fn cloud_with(points: &[([f64; 3], f64)]) -> GaussianCloud {
    let mut cloud = init_random_cloud(points.len(), &Aabb::unit(), 4).unwrap();
    for (i, (p, opacity)) in points.iter().enumerate() {
        cloud.centers[i] = *p;
        cloud.log_scales[i] = [math::ln(0.05); 3];
        cloud.opacity_logits[i] = math::logit(*opacity);
        for d in 0..ID_DIM {
            cloud.identity_codes[i][d] = (i * ID_DIM + d) as f64 * 0.01;
        }
    }
    cloud
}

#[test]
fn single_gaussian_weight_is_its_alpha() {
    let cloud = cloud_with(&[([0.0, 0.0, 2.0], 0.5)]);
    let out = render(&cloud, &camera(), &RenderSettings::new(10.0));
    let e = out.frame.id_feature.pixel(2, 2);
    for d in 0..ID_DIM {
        assert!((e[d] - 0.5 * cloud.identity_codes[0][d]).abs() < 1e-12);
    }
    assert!((out.frame.accum_alpha.get(2, 2) - 0.5).abs() < 1e-12);
    assert!((out.frame.soft_depth.get(2, 2) - 2.0).abs() < 1e-12);
}

#[test]
fn two_gaussians_expand_front_to_back() {
    let cloud = cloud_with(&[([0.0, 0.0, 2.0], 0.5), ([0.0, 0.0, 3.0], 0.5)]);
    let out = render(&cloud, &camera(), &RenderSettings::new(10.0));
    assert!((out.frame.accum_alpha.get(2, 2) - 0.75).abs() < 1e-12);
    let e = out.frame.id_feature.pixel(2, 2);
    for d in 0..ID_DIM {
        let want = 0.5 * cloud.identity_codes[0][d] + 0.25 * cloud.identity_codes[1][d];
        assert!((e[d] - want).abs() < 1e-12);
    }
    // Normalized expected depth (0.5·2 + 0.25·3) / 0.75.
    assert!((out.frame.soft_depth.get(2, 2) - 1.75 / 0.75).abs() < 1e-12);
}

#[test]
fn hard_depth_favors_nearest() {
    let cloud = cloud_with(&[([0.0, 0.0, 2.0], 0.2), ([0.0, 0.0, 3.0], 0.2)]);
    let out = render(&cloud, &camera(), &RenderSettings::new(10.0));
    let soft = out.frame.soft_depth.get(2, 2);
    let hard = out.frame.hard_depth.get(2, 2);
    // ω = 0.95: weights 0.95 and 0.0475.
    assert!((hard - (0.95 * 2.0 + 0.0475 * 3.0) / 0.9975).abs() < 1e-12);
    assert!(hard < soft);
}

#[test]
fn empty_pixels_get_background_depth() {
    let cloud = GaussianCloud::empty(0).unwrap();
    let out = render(&cloud, &camera(), &RenderSettings::new(7.0));
    assert!(out.frame.soft_depth.data().iter().all(|d| *d == 7.0));
    assert!(out.frame.hard_depth.data().iter().all(|d| *d == 7.0));
    assert!(out.frame.accum_alpha.data().iter().all(|a| *a == 0.0));
}

#[test]
fn unsorted_input_is_rejected() {
    let cloud = cloud_with(&[([0.0, 0.0, 2.0], 0.5), ([0.0, 0.0, 3.0], 0.5)]);
    let mut proj = project(&cloud, &camera());
    proj.swap(0, 1);
    assert!(matches!(
        composite(proj, &camera(), &cloud, &RenderSettings::new(10.0)),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn zero_adjoints_give_zero_gradients() {
    let cloud = cloud_with(&[([0.0, 0.0, 2.0], 0.5), ([0.05, 0.0, 3.0], 0.7)]);
    let cam = camera();
    let out = render(&cloud, &cam, &RenderSettings::new(10.0));
    let zero_c = Image::new(5, 5, 3, 0.0);
    let zero_d = Image::new(5, 5, 1, 0.0);
    let groups = [AdjointGroup {
        mask: ParamMask::ALL,
        adjoints: Adjoints {
            color: Some(&zero_c),
            soft_depth: Some(&zero_d),
            hard_depth: Some(&zero_d),
            ..Default::default()
        },
    }];
    let g = backward(&out, &cloud, &cam, &groups).unwrap();
    assert!(g.flatten().iter().all(|v| *v == 0.0));
    assert!(g.visible.iter().all(|v| *v));
}

#[test]
fn color_adjoint_leaves_identity_untouched() {
    let cloud = cloud_with(&[([0.0, 0.0, 2.0], 0.5), ([0.05, 0.0, 3.0], 0.7)]);
    let cam = camera();
    let out = render(&cloud, &cam, &RenderSettings::new(10.0));
    let ones = Image::new(5, 5, 3, 1.0);
    let groups = [AdjointGroup { mask: ParamMask::ALL, adjoints: Adjoints { color: Some(&ones), ..Default::default() } }];
    let g = backward(&out, &cloud, &cam, &groups).unwrap();
    assert!(g.identity_codes.iter().flatten().all(|v| *v == 0.0));
    assert!(g.colors.iter().flatten().any(|v| *v != 0.0));
}

#[test]
fn mismatched_adjoint_shape_is_rejected() {
    let cloud = cloud_with(&[([0.0, 0.0, 2.0], 0.5)]);
    let cam = camera();
    let out = render(&cloud, &cam, &RenderSettings::new(10.0));
    let wrong = Image::new(4, 5, 3, 1.0);
    let groups = [AdjointGroup { mask: ParamMask::ALL, adjoints: Adjoints { color: Some(&wrong), ..Default::default() } }];
    assert!(matches!(backward(&out, &cloud, &cam, &groups), Err(crate::Error::Contract(_))));
    let fewer = GaussianCloud::empty(0).unwrap();
    assert!(backward(&out, &fewer, &cam, &[]).is_err());
}
