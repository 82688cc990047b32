#pragma once

#include <optional>
#include <string>

#include "sagekeep/rng.hpp"
#include "sagekeep/tensor.hpp"

namespace sagekeep {

enum class AugmentKind {
    Identity,
    GaussianNoise,
    GaussianBlur,
    Gamma,
    BrightnessContrast,
    BiasField,
    RandomErasing,
    Cutout,
    Mixup,
    Cutmix,
};

AugmentKind augment_kind_from(const std::string& name);
std::string augment_kind_name(AugmentKind kind);

/// One baseline augmentation with its sampling ranges. The paper's baselines
/// come without published per-dataset settings, so every range here is
/// config-exposed; the defaults follow common practice.
struct AugmentSpec {
    AugmentKind kind = AugmentKind::Identity;

    double noise_sigma_lo = 0.01, noise_sigma_hi = 0.1;  // gaussian_noise
    double blur_sigma_lo = 0.5, blur_sigma_hi = 1.5;     // gaussian_blur
    std::size_t blur_kernel_size = 5;
    double gamma_lo = 0.7, gamma_hi = 1.4;               // gamma
    double brightness_lo = -0.1, brightness_hi = 0.1;    // brightness_contrast
    double contrast_lo = 0.8, contrast_hi = 1.2;
    std::size_t bias_order = 3;                          // bias_field
    double bias_amplitude = 0.3;
    double erase_area_lo = 0.02, erase_area_hi = 0.2;    // random_erasing
    double erase_aspect_lo = 0.3, erase_aspect_hi = 3.3;
    std::size_t cutout_size = 0;                         // 0 -> min(H, W) / 4
    double mixup_alpha = 0.4;
    double cutmix_alpha = 1.0;

    void validate() const;
};

struct Sample {
    Tensor image;   // C x H x W in [0, 1]
    Tensor labels;  // H x W class ids
};

struct AugmentResult {
    Tensor image;
    Tensor labels;
    // Blend weight of the primary sample: mixup's lambda, or the kept-pixel
    // fraction for cutmix. Absent for non-mixing kinds.
    std::optional<double> mix_weight;
};

/// Applies one augmentation draw. mixup/cutmix require a partner sample of
/// equal shape; all other kinds reject one. Output pixels stay in [0, 1];
/// intensity-only kinds leave labels untouched.
AugmentResult apply(const AugmentSpec& spec, const Tensor& x, const Tensor& y, Rng& rng,
                    const std::optional<Sample>& partner = std::nullopt);

/// Normalized radially-symmetric Gaussian kernel, k odd, sums to 1.
Tensor blur_kernel(double sigma, std::size_t k);

}  // namespace sagekeep
