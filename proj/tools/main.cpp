#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "sagekeep/pipeline.hpp"
#include "sagekeep/rng.hpp"

namespace fs = std::filesystem;
using namespace sagekeep;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct CommonOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t workers = 1;
};

RunConfig load_config_or_default(const CommonOpts& opts) {
    RunConfig cfg = opts.config_path.empty() ? RunConfig{} : load_run_config(opts.config_path);
    if (opts.seed) {
        cfg.seed = *opts.seed;
        cfg.sage.seed = derive_seed(cfg.seed, "sage");
        cfg.keep.seed = derive_seed(cfg.seed, "keep");
        cfg.synthetic.seed = derive_seed(cfg.seed, "synth");
    }
    if (!opts.out.empty()) cfg.out_dir = opts.out;
    return cfg;
}

int run_synth(const CommonOpts& opts, std::optional<std::size_t> n_override) {
    RunConfig cfg = load_config_or_default(opts);
    const std::size_t n = n_override.value_or(cfg.synth_count);
    DatasetManifest manifest = synth_dataset(cfg.synthetic, n, cfg.out_dir);
    std::cout << "wrote " << manifest.entries.size() << " samples under " << cfg.out_dir << "\n";
    return kExitOk;
}

int run_train_oracle(const CommonOpts& opts, const std::string& manifest_path,
                     const std::string& weights_out) {
    RunConfig cfg = load_config_or_default(opts);
    DatasetManifest manifest = load_manifest(manifest_path);
    TrainResult result = train_oracle(manifest, cfg);
    const std::string path = weights_out.empty()
                                 ? (fs::path(cfg.out_dir) / "oracle.skw").string()
                                 : weights_out;
    fs::create_directories(fs::path(path).parent_path().empty()
                               ? "."
                               : fs::path(path).parent_path().string());
    save_weights(result.net, path);
    std::cout << "train dice " << result.train_dice << ", eval dice " << result.eval_dice
              << ", weights -> " << path << "\n";
    if (!result.gate_passed) {
        std::cerr << "warning: training dice " << result.train_dice
                  << " below gate " << cfg.training.dice_gate << " (weights saved anyway)\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int run_sage_cmd(const CommonOpts& opts, const std::string& manifest_path,
                 const std::string& weights_path, std::optional<double> epsilon,
                 std::optional<int> steps, std::optional<std::size_t> token_size) {
    RunConfig cfg = load_config_or_default(opts);
    if (epsilon) cfg.sage.epsilon = *epsilon;
    if (steps) cfg.sage.steps = *steps;
    if (token_size) cfg.sage.token_size = *token_size;
    validate_sage_config(cfg.sage);
    DatasetManifest manifest = load_manifest(manifest_path);
    OracleNet oracle = load_weights(weights_path);
    MapGenResult result = generate_maps(manifest, oracle, cfg.sage, opts.workers, cfg.out_dir);
    std::cout << "wrote " << result.written.size() << " maps under " << cfg.out_dir << "\n";
    if (!result.failures.empty()) {
        for (const auto& [id, what] : result.failures)
            std::cerr << "failed " << id << ": " << what << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int run_keep_aug(const CommonOpts& opts, const std::string& manifest_path,
                 const std::string& maps_dir) {
    RunConfig cfg = load_config_or_default(opts);
    DatasetManifest manifest = load_manifest(manifest_path);
    fs::create_directories(cfg.out_dir);
    nlohmann::json sidecar = nlohmann::json::array();
    for (const auto& entry : manifest.entries) {
        Sample s = load_sample(entry, manifest.num_classes);
        std::string map_path = entry.map_path;
        if (map_path.empty() && !maps_dir.empty())
            map_path = (fs::path(maps_dir) / (entry.image_id + ".kcw1")).string();
        if (map_path.empty() || !fs::exists(map_path))
            throw DataError("keep-aug: no importance map for sample " + entry.image_id);
        ImportanceMap map = read_kcw1(map_path);
        Rng rng(derive_seed(cfg.keep.seed, entry.image_id));
        std::optional<Sample> partner;
        if (cfg.augment.kind == AugmentKind::Mixup || cfg.augment.kind == AugmentKind::Cutmix) {
            const auto& pick = manifest.entries[static_cast<std::size_t>(
                rng.uniform_int(manifest.entries.size()))];
            partner = load_sample(pick, manifest.num_classes);
        }
        KeepResult kr = keep_augment(s.image, s.labels, map, cfg.augment, cfg.keep, rng, partner);
        const std::string out_path =
            (fs::path(cfg.out_dir) / (entry.image_id + ".kct1")).string();
        write_kct1(kr.image, out_path);
        nlohmann::json rec;
        rec["image_id"] = entry.image_id;
        rec["core_tokens"] = mask_token_indices(kr.core_mask);
        rec["masked_tokens"] = mask_token_indices(kr.context_mask);
        sidecar.push_back(std::move(rec));
    }
    std::ofstream side((fs::path(cfg.out_dir) / "keep_audit.json").string(), std::ios::trunc);
    side << sidecar.dump(2) << "\n";
    std::cout << "wrote " << manifest.entries.size() << " augmented tensors under "
              << cfg.out_dir << "\n";
    return kExitOk;
}

int run_train(const CommonOpts& opts, const std::string& manifest_path, const std::string& mode,
              const std::string& maps_dir) {
    RunConfig cfg = load_config_or_default(opts);
    TrainMode train_mode;
    if (mode == "baseline_aug")
        train_mode = TrainMode::BaselineAug;
    else if (mode == "keep_core")
        train_mode = TrainMode::KeepCore;
    else
        throw DataError("train: mode must be baseline_aug or keep_core, got '" + mode + "'");
    DatasetManifest manifest = load_manifest(manifest_path);
    TrainResult result = train_model(manifest, cfg, train_mode, maps_dir);

    fs::create_directories(cfg.out_dir);
    save_weights(result.net, (fs::path(cfg.out_dir) / "model.skw").string());
    const auto records = evaluate_eval_split(result.net, manifest, cfg);
    write_report_json(records, (fs::path(cfg.out_dir) / "report.json").string());
    write_report_csv(records, (fs::path(cfg.out_dir) / "report.csv").string());
    write_aggregate_csv(records, (fs::path(cfg.out_dir) / "aggregate.csv").string());
    std::cout << "mode " << mode << ": train dice " << result.train_dice << ", eval dice "
              << mean_foreground_dice(records) << ", reports under " << cfg.out_dir << "\n";
    return kExitOk;
}

int run_eval(const CommonOpts& opts, const std::string& manifest_path,
             const std::string& weights_path, const std::string& split) {
    RunConfig cfg = load_config_or_default(opts);
    DatasetManifest manifest = load_manifest(manifest_path);
    OracleNet net = load_weights(weights_path);
    std::vector<MetricRecord> records;
    if (split == "eval") {
        records = evaluate_eval_split(net, manifest, cfg);
    } else if (split == "all") {
        std::vector<std::size_t> idx(manifest.entries.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        records = evaluate(net, manifest, idx);
    } else {
        throw DataError("eval: split must be 'all' or 'eval'");
    }
    fs::create_directories(cfg.out_dir);
    write_report_json(records, (fs::path(cfg.out_dir) / "report.json").string());
    write_report_csv(records, (fs::path(cfg.out_dir) / "report.csv").string());
    write_aggregate_csv(records, (fs::path(cfg.out_dir) / "aggregate.csv").string());
    std::cout << "mean foreground dice " << mean_foreground_dice(records) << ", reports under "
              << cfg.out_dir << "\n";
    return kExitOk;
}

int run_render(const std::string& map_path, const std::string& image_path,
               const std::string& out_path) {
    ImportanceMap map = read_kcw1(map_path);
    std::optional<Tensor> image;
    if (!image_path.empty()) {
        if (image_path.size() > 4 && image_path.substr(image_path.size() - 4) == ".pgm")
            image = pgm_to_image(read_pgm(image_path));
        else
            image = read_kct1(image_path);
        if (image->rank() == 2)
            image = Tensor::from_data({1, image->shape()[0], image->shape()[1]}, image->values());
    }
    render_map(map, image, out_path);
    std::cout << "wrote " << out_path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adversarial importance maps and significance-preserving augmentation for "
                 "small segmentation tasks"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string manifest_path, weights_path, weights_out, mode = "baseline_aug";
    std::string maps_dir, map_path, image_path, split = "all";
    std::optional<std::size_t> synth_n;
    std::optional<double> epsilon;
    std::optional<int> steps;
    std::optional<std::size_t> token_size;

    auto add_common = [&](CLI::App* cmd, bool with_workers = false) {
        cmd->add_option("--config", opts.config_path, "JSON run configuration");
        cmd->add_option("--seed", opts.seed, "Top-level seed (overrides config)");
        cmd->add_option("--out", opts.out, "Output directory");
        if (with_workers)
            cmd->add_option("--workers", opts.workers, "Worker threads")
                ->capture_default_str();
    };

    auto* synth = app.add_subcommand("synth", "Generate the synthetic planted-core dataset");
    add_common(synth);
    synth->add_option("--n", synth_n, "Number of samples");

    auto* train_oracle_cmd =
        app.add_subcommand("train-oracle", "Train and freeze the toy segmentation oracle");
    add_common(train_oracle_cmd);
    train_oracle_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    train_oracle_cmd->add_option("--weights-out", weights_out, "Weights file path");

    auto* sage_cmd =
        app.add_subcommand("sage", "Generate offline importance maps for every sample");
    add_common(sage_cmd, true);
    sage_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    sage_cmd->add_option("--weights", weights_path, "Frozen oracle weights")->required();
    sage_cmd->add_option("--epsilon", epsilon, "l-inf perturbation budget")
        ->default_str("0.05");
    sage_cmd->add_option("--steps", steps, "Optimization steps")->default_str("200");
    sage_cmd->add_option("--token-size", token_size, "Token size in pixels")->default_str("16");

    auto* keep_cmd =
        app.add_subcommand("keep-aug", "Apply map-guided augmentation offline with audit logs");
    add_common(keep_cmd);
    keep_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    keep_cmd->add_option("--maps", maps_dir, "Directory of KCW1 maps");

    auto* train_cmd = app.add_subcommand("train", "Train a model with augmentation");
    add_common(train_cmd);
    train_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    train_cmd->add_option("--mode", mode, "baseline_aug or keep_core")->capture_default_str();
    train_cmd->add_option("--maps", maps_dir, "Directory of KCW1 maps (keep_core mode)");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate saved weights on a manifest");
    add_common(eval_cmd);
    eval_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    eval_cmd->add_option("--weights", weights_path, "Weights file")->required();
    eval_cmd->add_option("--split", split, "all or eval")->capture_default_str();

    auto* render_cmd = app.add_subcommand("render", "Render a KCW1 map to PGM/PPM");
    render_cmd->add_option("--map", map_path, "KCW1 map file")->required();
    render_cmd->add_option("--image", image_path, "Optional image for a red overlay");
    render_cmd->add_option("--out", opts.out, "Output image path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return kExitUsage;
    }

    try {
        if (synth->parsed()) return run_synth(opts, synth_n);
        if (train_oracle_cmd->parsed()) return run_train_oracle(opts, manifest_path, weights_out);
        if (sage_cmd->parsed())
            return run_sage_cmd(opts, manifest_path, weights_path, epsilon, steps, token_size);
        if (keep_cmd->parsed()) return run_keep_aug(opts, manifest_path, maps_dir);
        if (train_cmd->parsed()) return run_train(opts, manifest_path, mode, maps_dir);
        if (eval_cmd->parsed()) return run_eval(opts, manifest_path, weights_path, split);
        if (render_cmd->parsed()) return run_render(map_path, image_path, opts.out);
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
