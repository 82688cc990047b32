#include "sagekeep/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "sagekeep/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sagekeep {

// ---- manifest ----

namespace {

void check_keys(const json& obj, const std::string& section,
                std::initializer_list<const char*> allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known)
            throw DataError("config: unknown key '" + it.key() + "' in section '" + section +
                            "'");
    }
}

std::string resolve(const fs::path& base_dir, const std::string& p) {
    if (p.empty()) return p;
    fs::path path(p);
    if (path.is_absolute()) return path.string();
    return (base_dir / path).string();
}

bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Sample load_sample(const ManifestEntry& entry, std::size_t num_classes) {
    Sample s;
    if (has_suffix(entry.image_path, ".kct1")) {
        Tensor t = read_kct1(entry.image_path);
        if (t.rank() == 2) t = Tensor::from_data({1, t.shape()[0], t.shape()[1]}, t.values());
        if (t.rank() != 3)
            throw DataError("image " + entry.image_path + ": expected CxHxW tensor, got " +
                            t.shape_str());
        s.image = std::move(t);
    } else if (has_suffix(entry.image_path, ".pgm")) {
        s.image = pgm_to_image(read_pgm(entry.image_path));
    } else {
        throw DataError("image " + entry.image_path + ": unsupported format (KCT1 or PGM)");
    }
    if (!has_suffix(entry.label_path, ".pgm"))
        throw DataError("label " + entry.label_path + ": labels must be PGM");
    s.labels = pgm_to_labels(read_pgm(entry.label_path));
    if (s.labels.shape()[0] != s.image.shape()[1] || s.labels.shape()[1] != s.image.shape()[2])
        throw DataError("sample " + entry.image_id + ": label grid " + s.labels.shape_str() +
                        " does not match image " + s.image.shape_str());
    for (std::size_t i = 0; i < s.labels.size(); ++i)
        if (s.labels[i] >= static_cast<double>(num_classes))
            throw DataError("sample " + entry.image_id + ": label " +
                            std::to_string(s.labels[i]) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    return s;
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw DataError("manifest " + path + ": " + e.what());
    }
    check_keys(doc, "manifest", {"num_classes", "spacing", "entries"});
    DatasetManifest m;
    m.num_classes = doc.at("num_classes").get<std::size_t>();
    if (m.num_classes < 2) throw DataError("manifest: num_classes must be >= 2");
    if (doc.contains("spacing")) {
        const auto& sp = doc.at("spacing");
        if (!sp.is_array() || sp.size() != 2) throw DataError("manifest: spacing must be [y, x]");
        m.spacing_y = sp[0].get<double>();
        m.spacing_x = sp[1].get<double>();
        if (m.spacing_y <= 0.0 || m.spacing_x <= 0.0)
            throw DataError("manifest: spacing must be positive");
    }
    const fs::path base = fs::path(path).parent_path();
    for (const auto& e : doc.at("entries")) {
        check_keys(e, "manifest entry", {"image_id", "image", "label", "map", "core_token"});
        ManifestEntry entry;
        entry.image_id = e.at("image_id").get<std::string>();
        entry.image_path = resolve(base, e.at("image").get<std::string>());
        entry.label_path = resolve(base, e.at("label").get<std::string>());
        if (e.contains("map")) entry.map_path = resolve(base, e.at("map").get<std::string>());
        if (e.contains("core_token")) {
            const auto& ct = e.at("core_token");
            entry.core_token = {ct[0].get<std::size_t>(), ct[1].get<std::size_t>()};
        }
        m.entries.push_back(std::move(entry));
    }
    // ids unique, every file parses, dims agree
    std::vector<std::string> ids;
    for (const auto& e : m.entries) ids.push_back(e.image_id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw DataError("manifest: duplicate image_id");
    for (const auto& e : m.entries) load_sample(e, m.num_classes);
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    const fs::path base = fs::path(path).parent_path();
    json doc;
    doc["num_classes"] = manifest.num_classes;
    doc["spacing"] = {manifest.spacing_y, manifest.spacing_x};
    json entries = json::array();
    for (const auto& e : manifest.entries) {
        json je;
        je["image_id"] = e.image_id;
        je["image"] = fs::relative(e.image_path, base).string();
        je["label"] = fs::relative(e.label_path, base).string();
        if (!e.map_path.empty()) je["map"] = fs::relative(e.map_path, base).string();
        if (e.core_token) je["core_token"] = {e.core_token->first, e.core_token->second};
        entries.push_back(std::move(je));
    }
    doc["entries"] = std::move(entries);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << doc.dump(2) << "\n";
}

// ---- synthetic task ----

namespace {

// Coarse 4x4 grid of uniform noise, bilinearly upsampled: a cheap smooth
// background field.
std::vector<double> smooth_field(std::size_t size, double amplitude, Rng& rng) {
    constexpr std::size_t kCoarse = 4;
    double coarse[kCoarse][kCoarse];
    for (auto& row : coarse)
        for (double& v : row) v = rng.uniform(-amplitude, amplitude);
    std::vector<double> field(size * size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double fy = static_cast<double>(y) / static_cast<double>(size - 1) *
                              static_cast<double>(kCoarse - 1);
            const double fx = static_cast<double>(x) / static_cast<double>(size - 1) *
                              static_cast<double>(kCoarse - 1);
            const std::size_t y0 = std::min<std::size_t>(kCoarse - 2, static_cast<std::size_t>(fy));
            const std::size_t x0 = std::min<std::size_t>(kCoarse - 2, static_cast<std::size_t>(fx));
            const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
            field[y * size + x] =
                coarse[y0][x0] * (1 - ty) * (1 - tx) + coarse[y0 + 1][x0] * ty * (1 - tx) +
                coarse[y0][x0 + 1] * (1 - ty) * tx + coarse[y0 + 1][x0 + 1] * ty * tx;
        }
    return field;
}

}  // namespace

DatasetManifest synth_dataset(const SyntheticTask& task, std::size_t n,
                              const std::string& out_dir) {
    if (n < 1) throw DataError("synth_dataset: n must be >= 1");
    if (task.num_classes != 2)
        throw DataError("synth_dataset: only the 2-class task is implemented");
    const std::size_t S = task.image_size, t = task.token_size;
    if (S == 0 || t == 0 || S % t != 0)
        throw DataError("synth_dataset: token_size must divide image_size");
    if (t < 6) throw DataError("synth_dataset: token_size must be >= 6 to fit a blob");
    const std::size_t grid = S / t;
    if (task.core_row >= grid || task.core_col >= grid)
        throw DataError("synth_dataset: core token outside the " + std::to_string(grid) + "x" +
                        std::to_string(grid) + " grid");

    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "labels");

    DatasetManifest manifest;
    manifest.num_classes = 2;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(task.seed, "sample", i));
        // fixed base level: the blob's intensity bump is the cue, the smooth
        // field keeps a plain global threshold from being exact
        const double bg = 0.35;
        const auto field = smooth_field(S, 0.03, rng);

        // Blob strictly inside the core token (1px guard band) so the
        // decision-relevant boundary stays in the designated token.
        const double max_r = static_cast<double>(t) / 2.0 - 1.0;
        const double ry = rng.uniform(0.65 * max_r, max_r);
        const double rx = rng.uniform(0.65 * max_r, max_r);
        const double jy = rng.uniform(-(max_r - ry), max_r - ry);
        const double jx = rng.uniform(-(max_r - rx), max_r - rx);
        const double cy = static_cast<double>(task.core_row * t) + t / 2.0 + jy;
        const double cx = static_cast<double>(task.core_col * t) + t / 2.0 + jx;
        const double contrast = task.contrast * rng.uniform(0.9, 1.1);

        std::vector<double> img(S * S);
        std::vector<std::uint8_t> lab(S * S, 0);
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x) {
                double v = bg + field[y * S + x];
                const double dy = (static_cast<double>(y) - cy) / ry;
                const double dx = (static_cast<double>(x) - cx) / rx;
                if (dy * dy + dx * dx <= 1.0) {
                    v += contrast;
                    lab[y * S + x] = 1;
                }
                img[y * S + x] = std::clamp(v, 0.05, 0.95);
            }

        char name[32];
        std::snprintf(name, sizeof(name), "synth-%04zu", i);
        ManifestEntry entry;
        entry.image_id = name;
        entry.image_path = (fs::path(out_dir) / "images" / (std::string(name) + ".kct1")).string();
        entry.label_path = (fs::path(out_dir) / "labels" / (std::string(name) + ".pgm")).string();
        entry.core_token = {task.core_row, task.core_col};
        write_kct1(Tensor::from_data({1, S, S}, std::move(img)), entry.image_path);
        write_pgm(PgmImage{S, S, std::move(lab)}, entry.label_path);
        manifest.entries.push_back(std::move(entry));
    }
    save_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

// ---- configuration ----

void RunConfig::validate() const {
    if (oracle.num_classes < 2) throw DataError("config: oracle.num_classes must be >= 2");
    if (oracle.depth < 1 || oracle.hidden < 1) throw DataError("config: bad oracle size");
    if (oracle.kernel % 2 == 0) throw DataError("config: oracle.kernel must be odd");
    validate_sage_config(sage);
    keep.validate();
    augment.validate();
    if (training.epochs < 1) throw DataError("config: training.epochs must be >= 1");
    if (training.batch < 1) throw DataError("config: training.batch must be >= 1");
    if (training.lr <= 0.0) throw DataError("config: training.lr must be positive");
    if (training.eval_fraction < 0.0 || training.eval_fraction >= 1.0)
        throw DataError("config: training.eval_fraction must be in [0, 1)");
    if (training.lambda_ce < 0.0 || training.lambda_dice < 0.0)
        throw DataError("config: training loss weights must be non-negative");
}

namespace {

void parse_range(const json& v, const char* what, double& lo, double& hi) {
    if (!v.is_array() || v.size() != 2)
        throw DataError(std::string("config: ") + what + " must be [lo, hi]");
    lo = v[0].get<double>();
    hi = v[1].get<double>();
}

AugmentSpec augment_from(const json& a) {
    check_keys(a, "augment",
               {"kind", "noise_sigma", "blur_sigma", "blur_kernel", "gamma", "brightness",
                "contrast", "bias_order", "bias_amplitude", "erase_area", "erase_aspect",
                "cutout_size", "mixup_alpha", "cutmix_alpha"});
    AugmentSpec spec;
    spec.kind = augment_kind_from(a.value("kind", std::string("identity")));
    if (a.contains("noise_sigma"))
        parse_range(a["noise_sigma"], "noise_sigma", spec.noise_sigma_lo, spec.noise_sigma_hi);
    if (a.contains("blur_sigma"))
        parse_range(a["blur_sigma"], "blur_sigma", spec.blur_sigma_lo, spec.blur_sigma_hi);
    if (a.contains("blur_kernel")) spec.blur_kernel_size = a["blur_kernel"].get<std::size_t>();
    if (a.contains("gamma")) parse_range(a["gamma"], "gamma", spec.gamma_lo, spec.gamma_hi);
    if (a.contains("brightness"))
        parse_range(a["brightness"], "brightness", spec.brightness_lo, spec.brightness_hi);
    if (a.contains("contrast"))
        parse_range(a["contrast"], "contrast", spec.contrast_lo, spec.contrast_hi);
    if (a.contains("bias_order")) spec.bias_order = a["bias_order"].get<std::size_t>();
    if (a.contains("bias_amplitude")) spec.bias_amplitude = a["bias_amplitude"].get<double>();
    if (a.contains("erase_area"))
        parse_range(a["erase_area"], "erase_area", spec.erase_area_lo, spec.erase_area_hi);
    if (a.contains("erase_aspect"))
        parse_range(a["erase_aspect"], "erase_aspect", spec.erase_aspect_lo, spec.erase_aspect_hi);
    if (a.contains("cutout_size")) spec.cutout_size = a["cutout_size"].get<std::size_t>();
    if (a.contains("mixup_alpha")) spec.mixup_alpha = a["mixup_alpha"].get<double>();
    if (a.contains("cutmix_alpha")) spec.cutmix_alpha = a["cutmix_alpha"].get<double>();
    spec.validate();
    return spec;
}

}  // namespace

AugmentSpec augment_spec_from_json(const std::string& json_text) {
    try {
        return augment_from(json::parse(json_text));
    } catch (const json::exception& e) {
        throw DataError(std::string("augment config: ") + e.what());
    }
}

RunConfig run_config_from_json(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw DataError(std::string("config: ") + e.what());
    }
    check_keys(doc, "config",
               {"oracle", "sage", "keep", "augment", "training", "synthetic", "seed", "out"});
    RunConfig cfg;
    if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("out")) cfg.out_dir = doc["out"].get<std::string>();

    if (doc.contains("oracle")) {
        const auto& o = doc["oracle"];
        check_keys(o, "oracle",
                   {"in_channels", "num_classes", "hidden", "depth", "kernel", "id", "variant",
                    "init_seed", "weights"});
        cfg.oracle.in_channels = o.value("in_channels", cfg.oracle.in_channels);
        cfg.oracle.num_classes = o.value("num_classes", cfg.oracle.num_classes);
        cfg.oracle.hidden = o.value("hidden", cfg.oracle.hidden);
        cfg.oracle.depth = o.value("depth", cfg.oracle.depth);
        cfg.oracle.kernel = o.value("kernel", cfg.oracle.kernel);
        cfg.oracle.id = o.value("id", cfg.oracle.id);
        if (o.contains("variant")) {
            const std::string v = o["variant"].get<std::string>();
            if (v.size() != 1) throw DataError("config: oracle.variant must be 'A' or 'B'");
            cfg.oracle.variant = v[0];
        }
        if (o.contains("init_seed")) cfg.oracle.init_seed = o["init_seed"].get<std::uint64_t>();
        if (o.contains("weights")) cfg.weights_path = o["weights"].get<std::string>();
    }
    if (doc.contains("sage")) {
        const auto& s = doc["sage"];
        check_keys(s, "sage",
                   {"epsilon", "steps", "alpha_init", "alpha_end", "mu_sparse", "beta_delta",
                    "lambda_ce", "lambda_dice", "lr", "token_size", "seed"});
        cfg.sage.epsilon = s.value("epsilon", cfg.sage.epsilon);
        cfg.sage.steps = s.value("steps", cfg.sage.steps);
        cfg.sage.alpha_init = s.value("alpha_init", cfg.sage.alpha_init);
        cfg.sage.alpha_end = s.value("alpha_end", cfg.sage.alpha_end);
        cfg.sage.mu_sparse = s.value("mu_sparse", cfg.sage.mu_sparse);
        cfg.sage.beta_delta = s.value("beta_delta", cfg.sage.beta_delta);
        cfg.sage.lambda_ce = s.value("lambda_ce", cfg.sage.lambda_ce);
        cfg.sage.lambda_dice = s.value("lambda_dice", cfg.sage.lambda_dice);
        cfg.sage.lr = s.value("lr", cfg.sage.lr);
        cfg.sage.token_size = s.value("token_size", cfg.sage.token_size);
        cfg.sage.seed = s.value("seed", cfg.sage.seed);
    }
    if (doc.contains("keep")) {
        const auto& k = doc["keep"];
        check_keys(k, "keep", {"tau_core", "tau_low", "rho_mask", "fill", "seed"});
        cfg.keep.tau_core = k.value("tau_core", cfg.keep.tau_core);
        cfg.keep.tau_low = k.value("tau_low", cfg.keep.tau_low);
        cfg.keep.rho_mask = k.value("rho_mask", cfg.keep.rho_mask);
        cfg.keep.fill = k.value("fill", cfg.keep.fill);
        cfg.keep.seed = k.value("seed", cfg.keep.seed);
    }
    if (doc.contains("augment")) cfg.augment = augment_from(doc["augment"]);
    if (doc.contains("training")) {
        const auto& t = doc["training"];
        check_keys(t, "training",
                   {"epochs", "batch", "lr", "eval_fraction", "lambda_ce", "lambda_dice",
                    "dice_gate", "early_stop"});
        cfg.training.epochs = t.value("epochs", cfg.training.epochs);
        cfg.training.batch = t.value("batch", cfg.training.batch);
        cfg.training.lr = t.value("lr", cfg.training.lr);
        cfg.training.eval_fraction = t.value("eval_fraction", cfg.training.eval_fraction);
        cfg.training.lambda_ce = t.value("lambda_ce", cfg.training.lambda_ce);
        cfg.training.lambda_dice = t.value("lambda_dice", cfg.training.lambda_dice);
        cfg.training.dice_gate = t.value("dice_gate", cfg.training.dice_gate);
        cfg.training.early_stop = t.value("early_stop", cfg.training.early_stop);
    }
    if (doc.contains("synthetic")) {
        const auto& s = doc["synthetic"];
        check_keys(s, "synthetic",
                   {"seed", "core_token", "contrast", "image_size", "token_size", "classes",
                    "count"});
        if (s.contains("core_token")) {
            const auto& ct = s["core_token"];
            if (!ct.is_array() || ct.size() != 2)
                throw DataError("config: synthetic.core_token must be [row, col]");
            cfg.synthetic.core_row = ct[0].get<std::size_t>();
            cfg.synthetic.core_col = ct[1].get<std::size_t>();
        }
        cfg.synthetic.contrast = s.value("contrast", cfg.synthetic.contrast);
        cfg.synthetic.image_size = s.value("image_size", cfg.synthetic.image_size);
        cfg.synthetic.token_size = s.value("token_size", cfg.synthetic.token_size);
        cfg.synthetic.num_classes = s.value("classes", cfg.synthetic.num_classes);
        cfg.synth_count = s.value("count", cfg.synth_count);
        if (s.contains("seed")) cfg.synthetic.seed = s["seed"].get<std::uint64_t>();
    }
    // One top-level seed determines everything unless a section pins its own.
    if (!doc.contains("sage") || !doc["sage"].contains("seed"))
        cfg.sage.seed = derive_seed(cfg.seed, "sage");
    if (!doc.contains("keep") || !doc["keep"].contains("seed"))
        cfg.keep.seed = derive_seed(cfg.seed, "keep");
    if (!doc.contains("synthetic") || !doc["synthetic"].contains("seed"))
        cfg.synthetic.seed = derive_seed(cfg.seed, "synth");
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(ss.str());
}

double cosine_lr(double lr0, std::size_t epoch, std::size_t total) {
    if (total == 0) throw DataError("cosine_lr: total epochs must be positive");
    return lr0 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(total))) /
           2.0;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double eval_fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    std::size_t eval_count =
        static_cast<std::size_t>(std::lround(eval_fraction * static_cast<double>(n)));
    if (eval_fraction > 0.0 && eval_count == 0 && n >= 2) eval_count = 1;
    if (eval_count >= n) eval_count = n - 1;
    std::vector<std::size_t> train(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(eval_count));
    std::vector<std::size_t> eval(idx.end() - static_cast<std::ptrdiff_t>(eval_count), idx.end());
    return {std::move(train), std::move(eval)};
}

// ---- training engine ----

namespace {

struct LoadedSample {
    std::string id;
    Sample data;
    ImportanceMap map;  // empty grid when unused
    bool has_map = false;
};

double fg_dice_on(const OracleNet& net, const std::vector<ConvParams>& params,
                  const std::vector<LoadedSample>& samples,
                  const std::vector<std::size_t>& indices) {
    if (indices.empty()) return 0.0;
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i : indices) {
        Tensor logits = forward_with_params(net, params, samples[i].data.image);
        Tensor pred = argmax_labels(logits);
        for (std::size_t k = 1; k < net.num_classes; ++k) {
            acc += overlap_metrics(pred, samples[i].data.labels, k).dice;
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

// Per-pixel CE weight grid for mixup under KEEP: full weight inside core
// tokens, the mixing coefficient outside.
Tensor core_weight_grid(const Tensor& core, std::size_t token_size, std::size_t h, std::size_t w,
                        double outside) {
    Tensor grid = Tensor::zeros({h, w});
    const std::size_t wt = core.shape()[1];
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            grid[y * w + x] =
                core[(y / token_size) * wt + x / token_size] != 0.0 ? 1.0 : outside;
    return grid;
}

struct FitResult {
    std::vector<ConvParams> params;
    double train_dice = 0.0;
    double eval_dice = 0.0;
    std::size_t best_epoch = 0;
};

FitResult fit(const OracleNet& arch, std::vector<LoadedSample>& samples,
              const RunConfig& config, TrainMode mode) {
    const auto& tc = config.training;
    const auto [train_idx, eval_idx] =
        split_indices(samples.size(), tc.eval_fraction, derive_seed(config.seed, "split"));
    if (train_idx.empty()) throw DataError("training: empty train split");

    std::vector<ConvParams> params = arch.params;
    // Final-layer bias starts at the train-split label log-priors. Without
    // this the imbalanced cross-entropy drives the rare classes into
    // saturation before any features form.
    {
        std::vector<double> counts(arch.num_classes, 1.0);
        double total = static_cast<double>(arch.num_classes);
        for (std::size_t i : train_idx)
            for (std::size_t px = 0; px < samples[i].data.labels.size(); ++px) {
                counts[static_cast<std::size_t>(samples[i].data.labels[px])] += 1.0;
                total += 1.0;
            }
        for (std::size_t k = 0; k < arch.num_classes; ++k)
            params.back().bias[k] = std::log(counts[k] / total);
    }
    std::vector<AdamState> adam_w, adam_b;
    for (const auto& p : params) {
        adam_w.emplace_back(p.weight.shape(), tc.lr);
        adam_b.emplace_back(p.bias.shape(), tc.lr);
    }

    const bool mixing = config.augment.kind == AugmentKind::Mixup ||
                        config.augment.kind == AugmentKind::Cutmix;
    std::vector<ConvParams> best_params = params;
    double best_eval = -1.0;
    std::size_t best_epoch = 0;

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const double lr_e = cosine_lr(tc.lr, epoch, tc.epochs);
        for (auto& s : adam_w) s.lr = lr_e;
        for (auto& s : adam_b) s.lr = lr_e;

        std::vector<std::size_t> order = train_idx;
        Rng order_rng(derive_seed(config.seed, "order", epoch));
        order_rng.shuffle(order);

        for (std::size_t start = 0; start < order.size(); start += tc.batch) {
            const std::size_t stop = std::min(order.size(), start + tc.batch);
            Tape tape;
            std::vector<ConvParams> tracked;
            tracked.reserve(params.size());
            for (const auto& p : params)
                tracked.push_back(ConvParams{tape.leaf(p.weight), tape.leaf(p.bias)});

            Tensor batch_loss = Tensor::scalar(0.0);
            for (std::size_t bi = start; bi < stop; ++bi) {
                LoadedSample& sample = samples[order[bi]];
                Rng aug_rng(derive_seed(config.seed, "aug-" + sample.id, epoch));

                std::optional<Sample> partner;
                Tensor y2;
                if (mixing) {
                    const std::size_t pick = train_idx[static_cast<std::size_t>(
                        aug_rng.uniform_int(train_idx.size()))];
                    partner = samples[pick].data;
                    y2 = samples[pick].data.labels;
                }

                Tensor x_in, y_in;
                std::optional<double> mix_w;
                Tensor core;  // KEEP's core grid, needed for mixup weighting
                if (mode == TrainMode::KeepCore) {
                    KeepResult kr = keep_augment(sample.data.image, sample.data.labels,
                                                 sample.map, config.augment, config.keep,
                                                 aug_rng, partner);
                    x_in = std::move(kr.image);
                    y_in = std::move(kr.labels);
                    mix_w = kr.mix_weight;
                    core = std::move(kr.core_mask);
                } else {
                    AugmentResult ar =
                        apply(config.augment, sample.data.image, sample.data.labels, aug_rng,
                              partner);
                    x_in = std::move(ar.image);
                    y_in = std::move(ar.labels);
                    mix_w = ar.mix_weight;
                }

                Tensor logits = forward_with_params(arch, tracked, x_in);
                Tensor loss_i;
                if (config.augment.kind == AugmentKind::Mixup) {
                    const double lam = *mix_w;
                    SegLosses l1 = seg_losses(logits, y_in);
                    SegLosses l2 = seg_losses(logits, y2);
                    Tensor dice_part = add(scalar_mul(l1.soft_dice, tc.lambda_dice * lam),
                                           scalar_mul(l2.soft_dice, tc.lambda_dice * (1 - lam)));
                    Tensor ce_part;
                    if (mode == TrainMode::KeepCore) {
                        const std::size_t h = y_in.shape()[0], w = y_in.shape()[1];
                        Tensor w1 = core_weight_grid(core, sample.map.token_size, h, w, lam);
                        Tensor w2 = core_weight_grid(core, sample.map.token_size, h, w, 1 - lam);
                        for (std::size_t i = 0; i < w2.size(); ++i)
                            if (w2[i] == 1.0 && w1[i] == 1.0) w2[i] = 0.0;  // core pixels: y1 only
                        ce_part = add(scalar_mul(weighted_ce(logits, y_in, w1), tc.lambda_ce),
                                      scalar_mul(weighted_ce(logits, y2, w2), tc.lambda_ce));
                    } else {
                        ce_part = add(scalar_mul(l1.ce, tc.lambda_ce * lam),
                                      scalar_mul(l2.ce, tc.lambda_ce * (1 - lam)));
                    }
                    loss_i = add(ce_part, dice_part);
                } else {
                    SegLosses l = seg_losses(logits, y_in);
                    loss_i = add(scalar_mul(l.ce, tc.lambda_ce),
                                 scalar_mul(l.soft_dice, tc.lambda_dice));
                }
                batch_loss = add(batch_loss, loss_i);
            }
            batch_loss = scalar_mul(batch_loss, 1.0 / static_cast<double>(stop - start));

            Gradients grads = backward(tape, batch_loss);
            for (std::size_t li = 0; li < params.size(); ++li) {
                adam_step(params[li].weight, grads.wrt(tracked[li].weight), adam_w[li]);
                adam_step(params[li].bias, grads.wrt(tracked[li].bias), adam_b[li]);
            }
        }

        if (tc.early_stop && !eval_idx.empty()) {
            const double ed = fg_dice_on(arch, params, samples, eval_idx);
            if (ed > best_eval) {
                best_eval = ed;
                best_params = params;
                best_epoch = epoch;
            }
        }
    }

    FitResult result;
    if (tc.early_stop && !eval_idx.empty()) {
        result.params = std::move(best_params);
        result.eval_dice = best_eval;
        result.best_epoch = best_epoch;
    } else {
        result.params = std::move(params);
        result.eval_dice = eval_idx.empty() ? 0.0 : fg_dice_on(arch, result.params, samples, eval_idx);
        result.best_epoch = tc.epochs - 1;
    }
    result.train_dice = fg_dice_on(arch, result.params, samples, train_idx);
    return result;
}

OracleNet build_arch(const OracleSpec& spec) {
    const std::uint64_t seed =
        spec.init_seed ? *spec.init_seed
                       : (spec.variant == 'B' || spec.variant == 'b' ? 0xB0BB5EEDull
                                                                     : 0xA11CE5EEDull);
    return make_oracle(spec.id, spec.in_channels, spec.num_classes, seed, spec.hidden, spec.depth,
                       spec.kernel);
}

std::vector<LoadedSample> load_all(const DatasetManifest& manifest) {
    std::vector<LoadedSample> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        LoadedSample s;
        s.id = e.image_id;
        s.data = load_sample(e, manifest.num_classes);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TrainResult train_oracle(const DatasetManifest& manifest, const RunConfig& config) {
    config.validate();
    RunConfig identity_cfg = config;
    identity_cfg.augment = AugmentSpec{};  // the toy recipe augments nothing
    return train_model(manifest, identity_cfg, TrainMode::BaselineAug, "");
}

TrainResult train_model(const DatasetManifest& manifest, const RunConfig& config, TrainMode mode,
                        const std::string& maps_dir) {
    config.validate();
    if (manifest.entries.empty()) throw DataError("training: empty manifest");
    std::vector<LoadedSample> samples = load_all(manifest);
    if (samples[0].data.image.shape()[0] != config.oracle.in_channels)
        throw DataError("training: data has " + std::to_string(samples[0].data.image.shape()[0]) +
                        " channels, oracle spec expects " +
                        std::to_string(config.oracle.in_channels));
    if (manifest.num_classes != config.oracle.num_classes)
        throw DataError("training: manifest has " + std::to_string(manifest.num_classes) +
                        " classes, oracle spec expects " +
                        std::to_string(config.oracle.num_classes));

    if (mode == TrainMode::KeepCore) {
        // every sample needs its map before any work starts
        for (std::size_t i = 0; i < samples.size(); ++i) {
            std::string path = manifest.entries[i].map_path;
            if (path.empty() && !maps_dir.empty())
                path = (fs::path(maps_dir) / (samples[i].id + ".kcw1")).string();
            if (path.empty() || !fs::exists(path))
                throw DataError("keep_core mode: no importance map for sample " + samples[i].id);
            samples[i].map = read_kcw1(path);
            samples[i].has_map = true;
            if (samples[i].map.image_h() != samples[i].data.image.shape()[1] ||
                samples[i].map.image_w() != samples[i].data.image.shape()[2])
                throw DataError("map for " + samples[i].id + " covers the wrong image size");
        }
    }

    OracleNet arch = build_arch(config.oracle);
    FitResult fitted = fit(arch, samples, config, mode);

    TrainResult result;
    result.net = std::move(arch);
    result.net.params = std::move(fitted.params);
    result.net.frozen = true;
    result.train_dice = fitted.train_dice;
    result.eval_dice = fitted.eval_dice;
    result.best_epoch = fitted.best_epoch;
    result.gate_passed = result.train_dice >= config.training.dice_gate;
    return result;
}

// ---- map generation ----

MapGenResult generate_maps(const DatasetManifest& manifest, const OracleNet& oracle,
                           const SageConfig& cfg, std::size_t workers,
                           const std::string& out_dir) {
    validate_sage_config(cfg);
    validate_oracle(oracle);
    if (!oracle.frozen) throw DataError("generate_maps: oracle must be frozen");
    fs::create_directories(out_dir);

    MapGenResult result;
    std::vector<std::string> written(manifest.entries.size());
    std::vector<std::pair<std::string, std::string>> failures;
    std::mutex mu;
    std::atomic<std::size_t> next{0};

    auto work = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= manifest.entries.size()) break;
            const auto& entry = manifest.entries[i];
            try {
                Sample s = load_sample(entry, manifest.num_classes);
                SageConfig per_image = cfg;
                per_image.seed = derive_seed(cfg.seed, entry.image_id);
                ImportanceMap map = run_sage(oracle, s.image, s.labels, per_image, entry.image_id);
                const std::string path =
                    (fs::path(out_dir) / (entry.image_id + ".kcw1")).string();
                write_kcw1(map, path);
                written[i] = path;
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(mu);
                failures.emplace_back(entry.image_id, e.what());
            }
        }
    };

    const std::size_t nthreads = std::max<std::size_t>(1, std::min(workers, manifest.entries.size() ? manifest.entries.size() : 1));
    if (nthreads == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < nthreads; ++i) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }

    for (auto& w : written)
        if (!w.empty()) result.written.push_back(std::move(w));
    std::sort(failures.begin(), failures.end());
    result.failures = std::move(failures);
    return result;
}

// ---- evaluation & reports ----

std::vector<MetricRecord> evaluate(const OracleNet& net, const DatasetManifest& manifest,
                                   const std::vector<std::size_t>& indices) {
    validate_oracle(net);
    std::vector<MetricRecord> records;
    for (std::size_t i : indices) {
        const auto& entry = manifest.entries[i];
        Sample s = load_sample(entry, manifest.num_classes);
        Tensor logits = forward(net, s.image);
        Tensor pred = argmax_labels(logits);
        for (std::size_t k = 1; k < net.num_classes; ++k) {
            MetricRecord rec;
            rec.sample_id = entry.image_id;
            rec.cls = k;
            const OverlapMetrics m = overlap_metrics(pred, s.labels, k);
            rec.dice = m.dice;
            rec.iou = m.iou;
            rec.acc = m.acc;
            rec.pre = m.pre;
            rec.sen = m.sen;
            rec.spe = m.spe;
            const auto sd = surface_distances(class_mask(pred, k), class_mask(s.labels, k),
                                              manifest.spacing_y, manifest.spacing_x);
            if (sd) {
                rec.hd95 = sd->hd95;
                rec.asd = sd->asd;
            }
            records.push_back(std::move(rec));
        }
    }
    return records;
}

std::vector<MetricRecord> evaluate_eval_split(const OracleNet& net,
                                              const DatasetManifest& manifest,
                                              const RunConfig& config) {
    const auto [train_idx, eval_idx] = split_indices(
        manifest.entries.size(), config.training.eval_fraction, derive_seed(config.seed, "split"));
    return evaluate(net, manifest, eval_idx);
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : "nan"; }

}  // namespace

void write_report_json(const std::vector<MetricRecord>& records, const std::string& path) {
    json arr = json::array();
    for (const auto& r : records) {
        json rec;
        rec["sample_id"] = r.sample_id;
        rec["class"] = r.cls;
        rec["dice"] = r.dice;
        rec["iou"] = r.iou;
        if (r.hd95)
            rec["hd95"] = *r.hd95;
        else
            rec["hd95"] = nullptr;
        if (r.asd)
            rec["asd"] = *r.asd;
        else
            rec["asd"] = nullptr;
        rec["acc"] = r.acc;
        rec["pre"] = r.pre;
        rec["sen"] = r.sen;
        rec["spe"] = r.spe;
        arr.push_back(std::move(rec));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write report: " + path);
    out << arr.dump(2) << "\n";
}

void write_report_csv(const std::vector<MetricRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write report: " + path);
    out << "sample_id,class,dice,hd95,asd,iou,acc,pre,sen,spe\n";
    for (const auto& r : records)
        out << r.sample_id << "," << r.cls << "," << fmt(r.dice) << "," << fmt_opt(r.hd95) << ","
            << fmt_opt(r.asd) << "," << fmt(r.iou) << "," << fmt(r.acc) << "," << fmt(r.pre)
            << "," << fmt(r.sen) << "," << fmt(r.spe) << "\n";
}

void write_aggregate_csv(const std::vector<MetricRecord>& records, const std::string& path) {
    std::map<std::size_t, std::vector<const MetricRecord*>> by_class;
    for (const auto& r : records) by_class[r.cls].push_back(&r);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write report: " + path);
    out << "class,dice,hd95,asd,iou,acc,pre,sen,spe\n";
    for (const auto& [cls, rows] : by_class) {
        double dice = 0, iou = 0, acc = 0, pre = 0, sen = 0, spe = 0;
        double hd = 0, asd = 0;
        std::size_t surf_count = 0;
        for (const auto* r : rows) {
            dice += r->dice;
            iou += r->iou;
            acc += r->acc;
            pre += r->pre;
            sen += r->sen;
            spe += r->spe;
            if (r->hd95) {
                hd += *r->hd95;
                asd += *r->asd;
                ++surf_count;
            }
        }
        const double n = static_cast<double>(rows.size());
        out << cls << "," << fmt(dice / n) << ","
            << (surf_count ? fmt(hd / static_cast<double>(surf_count)) : "nan") << ","
            << (surf_count ? fmt(asd / static_cast<double>(surf_count)) : "nan") << ","
            << fmt(iou / n) << "," << fmt(acc / n) << "," << fmt(pre / n) << "," << fmt(sen / n)
            << "," << fmt(spe / n) << "\n";
    }
}

double mean_foreground_dice(const std::vector<MetricRecord>& records) {
    if (records.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& r : records) acc += r.dice;
    return acc / static_cast<double>(records.size());
}

// ---- rendering ----

void render_map(const ImportanceMap& map, const std::optional<Tensor>& image,
                const std::string& out_path) {
    validate_map(map);
    const Tensor up = upsample_nearest(map.grid, map.token_size, map.token_size);
    const std::size_t H = up.shape()[0], W = up.shape()[1];
    auto to_byte = [](double v) {
        return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    };

    if (!image) {
        PgmImage img;
        img.height = H;
        img.width = W;
        img.pixels.resize(H * W);
        for (std::size_t i = 0; i < H * W; ++i) img.pixels[i] = to_byte(up[i]);
        write_pgm(img, out_path);
        return;
    }

    if (image->rank() != 3 || image->shape()[1] != H || image->shape()[2] != W)
        throw DataError("render_map: image " + image->shape_str() + " does not match map " +
                        std::to_string(H) + "x" + std::to_string(W));
    const std::size_t C = image->shape()[0];
    std::vector<std::uint8_t> rgb(H * W * 3);
    for (std::size_t i = 0; i < H * W; ++i) {
        double gray = 0.0;
        for (std::size_t c = 0; c < C; ++c) gray += (*image)[c * H * W + i];
        gray /= static_cast<double>(C);
        // 50% base image + 50% red channel scaled by W
        rgb[3 * i + 0] = to_byte(0.5 * gray + 0.5 * up[i]);
        rgb[3 * i + 1] = to_byte(0.5 * gray);
        rgb[3 * i + 2] = to_byte(0.5 * gray);
    }
    write_ppm(H, W, rgb, out_path);
}

}  // namespace sagekeep
