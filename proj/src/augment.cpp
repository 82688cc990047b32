#include "sagekeep/augment.hpp"

#include <algorithm>
#include <cmath>

namespace sagekeep {

AugmentKind augment_kind_from(const std::string& name) {
    if (name == "identity") return AugmentKind::Identity;
    if (name == "gaussian_noise") return AugmentKind::GaussianNoise;
    if (name == "gaussian_blur") return AugmentKind::GaussianBlur;
    if (name == "gamma") return AugmentKind::Gamma;
    if (name == "brightness_contrast") return AugmentKind::BrightnessContrast;
    if (name == "bias_field") return AugmentKind::BiasField;
    if (name == "random_erasing") return AugmentKind::RandomErasing;
    if (name == "cutout") return AugmentKind::Cutout;
    if (name == "mixup") return AugmentKind::Mixup;
    if (name == "cutmix") return AugmentKind::Cutmix;
    throw DataError("unknown augmentation kind '" + name + "'");
}

std::string augment_kind_name(AugmentKind kind) {
    switch (kind) {
        case AugmentKind::Identity: return "identity";
        case AugmentKind::GaussianNoise: return "gaussian_noise";
        case AugmentKind::GaussianBlur: return "gaussian_blur";
        case AugmentKind::Gamma: return "gamma";
        case AugmentKind::BrightnessContrast: return "brightness_contrast";
        case AugmentKind::BiasField: return "bias_field";
        case AugmentKind::RandomErasing: return "random_erasing";
        case AugmentKind::Cutout: return "cutout";
        case AugmentKind::Mixup: return "mixup";
        case AugmentKind::Cutmix: return "cutmix";
    }
    throw DataError("unknown augmentation kind");
}

void AugmentSpec::validate() const {
    auto range_ok = [](double lo, double hi) { return lo <= hi; };
    if (!range_ok(noise_sigma_lo, noise_sigma_hi) || noise_sigma_lo < 0.0)
        throw DataError("augment: bad noise sigma range");
    if (!range_ok(blur_sigma_lo, blur_sigma_hi) || blur_sigma_lo <= 0.0)
        throw DataError("augment: bad blur sigma range");
    if (blur_kernel_size % 2 == 0) throw DataError("augment: blur kernel must be odd");
    if (!range_ok(gamma_lo, gamma_hi) || gamma_lo <= 0.0)
        throw DataError("augment: bad gamma range");
    if (!range_ok(brightness_lo, brightness_hi)) throw DataError("augment: bad brightness range");
    if (!range_ok(contrast_lo, contrast_hi) || contrast_lo <= 0.0)
        throw DataError("augment: bad contrast range");
    if (bias_amplitude < 0.0) throw DataError("augment: bias amplitude must be >= 0");
    if (!range_ok(erase_area_lo, erase_area_hi) || erase_area_lo <= 0.0 || erase_area_hi > 1.0)
        throw DataError("augment: bad erase area range");
    if (!range_ok(erase_aspect_lo, erase_aspect_hi) || erase_aspect_lo <= 0.0)
        throw DataError("augment: bad erase aspect range");
    if (mixup_alpha <= 0.0 || cutmix_alpha <= 0.0)
        throw DataError("augment: mix alphas must be positive");
}

Tensor blur_kernel(double sigma, std::size_t k) {
    if (k % 2 == 0) throw DataError("blur_kernel: kernel size must be odd, got " +
                                    std::to_string(k));
    if (sigma <= 0.0) throw DataError("blur_kernel: sigma must be positive");
    const double c = static_cast<double>(k / 2);
    std::vector<double> vals(k * k);
    double total = 0.0;
    for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) {
            const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
            const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            vals[y * k + x] = v;
            total += v;
        }
    for (double& v : vals) v /= total;
    return Tensor::from_data({k, k}, std::move(vals));
}

namespace {

void clamp01(Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::clamp(t[i], 0.0, 1.0);
}

Tensor blur_image(const Tensor& x, const Tensor& kernel) {
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const std::size_t k = kernel.shape()[0];
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t c = 0; c < C; ++c) {
        const double* in = x.data() + c * H * W;
        double* dst = out.data() + c * H * W;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x_ = 0; x_ < W; ++x_) {
                double acc = 0.0;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t sy =
                            static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(ky) - pad;
                        const std::ptrdiff_t sx =
                            static_cast<std::ptrdiff_t>(x_) + static_cast<std::ptrdiff_t>(kx) - pad;
                        if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(H) ||
                            sx >= static_cast<std::ptrdiff_t>(W))
                            continue;  // zero padding
                        acc += kernel[ky * k + kx] *
                               in[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)];
                    }
                dst[y * W + x_] = acc;
            }
    }
    return out;
}

// Low-order polynomial surface in normalized coordinates, exponentiated and
// normalized to mean 1 -- a stock simulation of MRI intensity inhomogeneity.
Tensor bias_field_surface(std::size_t h, std::size_t w, std::size_t order, double amplitude,
                          Rng& rng) {
    std::vector<double> coeffs;
    for (std::size_t i = 0; i <= order; ++i)
        for (std::size_t j = 0; i + j <= order; ++j)
            coeffs.push_back(rng.uniform(-amplitude, amplitude));
    std::vector<double> field(h * w);
    double mean = 0.0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double u = h > 1 ? 2.0 * static_cast<double>(y) / (h - 1.0) - 1.0 : 0.0;
            const double v = w > 1 ? 2.0 * static_cast<double>(x) / (w - 1.0) - 1.0 : 0.0;
            double poly = 0.0;
            std::size_t idx = 0;
            for (std::size_t i = 0; i <= order; ++i)
                for (std::size_t j = 0; i + j <= order; ++j)
                    poly += coeffs[idx++] * std::pow(u, static_cast<double>(i)) *
                            std::pow(v, static_cast<double>(j));
            field[y * w + x] = std::exp(poly);
            mean += field[y * w + x];
        }
    mean /= static_cast<double>(h * w);
    for (double& f : field) f /= mean;
    return Tensor::from_data({h, w}, std::move(field));
}

struct Rect {
    std::size_t y0, x0, h, w;
};

void fill_rect(Tensor& x, const Rect& r, double value) {
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = r.y0; y < std::min(H, r.y0 + r.h); ++y)
            for (std::size_t xx = r.x0; xx < std::min(W, r.x0 + r.w); ++xx)
                x[(c * H + y) * W + xx] = value;
}

}  // namespace

AugmentResult apply(const AugmentSpec& spec, const Tensor& x, const Tensor& y, Rng& rng,
                    const std::optional<Sample>& partner) {
    spec.validate();
    if (x.rank() != 3) throw DataError("augment: image must be CxHxW, got " + x.shape_str());
    if (y.rank() != 2 || y.shape()[0] != x.shape()[1] || y.shape()[1] != x.shape()[2])
        throw DataError("augment: labels " + y.shape_str() + " do not match image " +
                        x.shape_str());
    const bool mixing = spec.kind == AugmentKind::Mixup || spec.kind == AugmentKind::Cutmix;
    if (mixing && !partner)
        throw DataError("augment: " + augment_kind_name(spec.kind) + " requires a partner sample");
    if (!mixing && partner)
        throw DataError("augment: " + augment_kind_name(spec.kind) + " does not take a partner");
    if (partner && (partner->image.shape() != x.shape() || partner->labels.shape() != y.shape()))
        throw DataError("augment: partner shape mismatch");

    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    AugmentResult out{x, y, std::nullopt};

    switch (spec.kind) {
        case AugmentKind::Identity:
            break;
        case AugmentKind::GaussianNoise: {
            const double sigma = rng.uniform(spec.noise_sigma_lo, spec.noise_sigma_hi);
            for (std::size_t i = 0; i < out.image.size(); ++i)
                out.image[i] += rng.normal(0.0, sigma);
            clamp01(out.image);
            break;
        }
        case AugmentKind::GaussianBlur: {
            const double sigma = rng.uniform(spec.blur_sigma_lo, spec.blur_sigma_hi);
            out.image = blur_image(x, blur_kernel(sigma, spec.blur_kernel_size));
            clamp01(out.image);
            break;
        }
        case AugmentKind::Gamma: {
            const double gamma = rng.uniform(spec.gamma_lo, spec.gamma_hi);
            for (std::size_t i = 0; i < out.image.size(); ++i)
                out.image[i] = std::pow(std::clamp(out.image[i], 0.0, 1.0), gamma);
            break;
        }
        case AugmentKind::BrightnessContrast: {
            const double b = rng.uniform(spec.brightness_lo, spec.brightness_hi);
            const double c = rng.uniform(spec.contrast_lo, spec.contrast_hi);
            for (std::size_t i = 0; i < out.image.size(); ++i)
                out.image[i] = c * (out.image[i] - 0.5) + 0.5 + b;
            clamp01(out.image);
            break;
        }
        case AugmentKind::BiasField: {
            const Tensor field = bias_field_surface(H, W, spec.bias_order, spec.bias_amplitude, rng);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < H * W; ++i) out.image[c * H * W + i] *= field[i];
            clamp01(out.image);
            break;
        }
        case AugmentKind::RandomErasing: {
            const double area =
                rng.uniform(spec.erase_area_lo, spec.erase_area_hi) * static_cast<double>(H * W);
            const double aspect = rng.uniform(spec.erase_aspect_lo, spec.erase_aspect_hi);
            const std::size_t rh =
                std::min(H, std::max<std::size_t>(1, static_cast<std::size_t>(
                                                         std::lround(std::sqrt(area * aspect)))));
            const std::size_t rw =
                std::min(W, std::max<std::size_t>(1, static_cast<std::size_t>(
                                                         std::lround(std::sqrt(area / aspect)))));
            Rect r{rng.uniform_int(H - rh + 1), rng.uniform_int(W - rw + 1), rh, rw};
            // noise fill, per classic random erasing
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t yy = r.y0; yy < r.y0 + r.h; ++yy)
                    for (std::size_t xx = r.x0; xx < r.x0 + r.w; ++xx)
                        out.image[(c * H + yy) * W + xx] = rng.uniform();
            break;
        }
        case AugmentKind::Cutout: {
            const std::size_t size =
                spec.cutout_size > 0 ? spec.cutout_size : std::min(H, W) / 4;
            // center anywhere; the square may be clipped at the borders
            const std::size_t cy = rng.uniform_int(H), cx = rng.uniform_int(W);
            const std::size_t half = size / 2;
            const std::size_t y0 = cy > half ? cy - half : 0;
            const std::size_t x0 = cx > half ? cx - half : 0;
            fill_rect(out.image, Rect{y0, x0, size, size}, 0.0);
            break;
        }
        case AugmentKind::Mixup: {
            const double lambda = rng.beta(spec.mixup_alpha, spec.mixup_alpha);
            for (std::size_t i = 0; i < out.image.size(); ++i)
                out.image[i] = lambda * x[i] + (1.0 - lambda) * partner->image[i];
            clamp01(out.image);
            out.mix_weight = lambda;  // labels stay primary; weighting is loss-side
            break;
        }
        case AugmentKind::Cutmix: {
            const double lambda = rng.beta(spec.cutmix_alpha, spec.cutmix_alpha);
            const double cut = std::sqrt(1.0 - lambda);
            const std::size_t rh = std::min(
                H, std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cut * H))));
            const std::size_t rw = std::min(
                W, std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cut * W))));
            Rect r{rng.uniform_int(H - rh + 1), rng.uniform_int(W - rw + 1), rh, rw};
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t yy = r.y0; yy < r.y0 + r.h; ++yy)
                    for (std::size_t xx = r.x0; xx < r.x0 + r.w; ++xx)
                        out.image[(c * H + yy) * W + xx] = partner->image[(c * H + yy) * W + xx];
            for (std::size_t yy = r.y0; yy < r.y0 + r.h; ++yy)
                for (std::size_t xx = r.x0; xx < r.x0 + r.w; ++xx)
                    out.labels[yy * W + xx] = partner->labels[yy * W + xx];
            out.mix_weight =
                1.0 - static_cast<double>(rh * rw) / static_cast<double>(H * W);
            break;
        }
    }
    return out;
}

}  // namespace sagekeep
