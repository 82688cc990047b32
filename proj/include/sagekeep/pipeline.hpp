#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sagekeep/augment.hpp"
#include "sagekeep/io.hpp"
#include "sagekeep/keep.hpp"
#include "sagekeep/metrics.hpp"
#include "sagekeep/oracle.hpp"
#include "sagekeep/sage.hpp"

namespace sagekeep {

// ---- dataset ----

struct ManifestEntry {
    std::string image_id;
    std::string image_path;  // KCT1 or 8-bit PGM
    std::string label_path;  // PGM with class indices
    std::string map_path;    // optional KCW1
    std::optional<std::pair<std::size_t, std::size_t>> core_token;  // synthetic ground truth
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::size_t num_classes = 2;
    double spacing_y = 1.0, spacing_x = 1.0;  // mm
};

/// Parses and fully validates: unique ids, files exist and parse, image and
/// label dimensions agree, labels within [0, num_classes).
DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

Sample load_sample(const ManifestEntry& entry, std::size_t num_classes);

// ---- synthetic task ----

/// Desk-scale stand-in dataset: a low-contrast elliptical blob planted
/// entirely inside one designated token, over a smoothly varying background.
/// The blob boundary is the decision-relevant (and attackable) content, so
/// the ground-truth most-important token is known by construction.
struct SyntheticTask {
    std::uint64_t seed = 0;
    std::size_t core_row = 1, core_col = 1;  // token coordinates
    double contrast = 0.25;
    std::size_t image_size = 64;
    std::size_t token_size = 16;
    std::size_t num_classes = 2;
};

/// Generates n samples under out_dir (images/ as KCT1, labels/ as PGM) and
/// returns the manifest; also writes out_dir/manifest.json. Bit-reproducible
/// from the task seed.
DatasetManifest synth_dataset(const SyntheticTask& task, std::size_t n,
                              const std::string& out_dir);

// ---- run configuration ----

struct OracleSpec {
    std::size_t in_channels = 1;
    std::size_t num_classes = 2;
    std::size_t hidden = 16;
    std::size_t depth = 4;
    std::size_t kernel = 3;
    std::string id = "oracle-A";
    char variant = 'A';  // picks one of the stock init seeds unless init_seed is set
    std::optional<std::uint64_t> init_seed;
};

struct TrainingConfig {
    std::size_t epochs = 50;
    std::size_t batch = 16;
    double lr = 1e-3;
    double eval_fraction = 0.25;
    double lambda_ce = 1.0;
    double lambda_dice = 2.0;  // the imbalanced toy task needs the extra overlap pressure
    double dice_gate = 0.85;   // train-set foreground Dice the toy oracle must reach
    bool early_stop = true;   // keep the checkpoint with the best eval Dice
};

struct RunConfig {
    OracleSpec oracle;
    std::string weights_path;
    SageConfig sage;
    KeepConfig keep;
    AugmentSpec augment;
    TrainingConfig training;
    SyntheticTask synthetic;
    std::size_t synth_count = 48;
    std::uint64_t seed = 0;
    std::string out_dir = ".";

    void validate() const;
};

/// Strict JSON parsing: unknown keys inside known sections are rejected so a
/// typo cannot silently fall back to a default.
RunConfig run_config_from_json(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
AugmentSpec augment_spec_from_json(const std::string& json_text);

/// lr0 * (1 + cos(pi * epoch / total)) / 2
double cosine_lr(double lr0, std::size_t epoch, std::size_t total);

// ---- training ----

enum class TrainMode { BaselineAug, KeepCore };

struct TrainResult {
    OracleNet net;
    double train_dice = 0.0;   // mean foreground Dice on the train split
    double eval_dice = 0.0;    // mean foreground Dice on the eval split (0 if none)
    bool gate_passed = true;
    std::size_t best_epoch = 0;
};

/// Toy pre-training recipe for the frozen oracle: identity augmentation,
/// Adam with cosine decay, CE + soft Dice. The returned net is frozen.
TrainResult train_oracle(const DatasetManifest& manifest, const RunConfig& config);

/// Same training engine with the configured augmentation; KeepCore wraps it
/// in the restore/mask intervention using each sample's importance map.
/// Baseline and KeepCore consume identical splits, orderings, and
/// augmentation draws for a given seed.
TrainResult train_model(const DatasetManifest& manifest, const RunConfig& config, TrainMode mode,
                        const std::string& maps_dir = "");

// ---- offline map generation ----

struct MapGenResult {
    std::vector<std::string> written;  // one KCW1 path per image
    std::vector<std::pair<std::string, std::string>> failures;  // (image_id, what)
};

/// One KCW1 per manifest entry under out_dir, named <image_id>.kcw1. The
/// per-image seed is derived from (cfg.seed, image_id), so output bytes do
/// not depend on the worker count.
MapGenResult generate_maps(const DatasetManifest& manifest, const OracleNet& oracle,
                           const SageConfig& cfg, std::size_t workers,
                           const std::string& out_dir);

// ---- evaluation & reports ----

struct MetricRecord {
    std::string sample_id;
    std::size_t cls = 0;
    double dice = 0, iou = 0, acc = 0, pre = 0, sen = 0, spe = 0;
    std::optional<double> hd95, asd;  // undefined when either mask is empty
};

/// Per-sample, per-foreground-class metrics of argmax predictions. The eval
/// path reads images and labels only -- never importance maps.
std::vector<MetricRecord> evaluate(const OracleNet& net, const DatasetManifest& manifest,
                                   const std::vector<std::size_t>& indices);

/// Evaluate on the run's held-out split (derived from seed + eval_fraction).
std::vector<MetricRecord> evaluate_eval_split(const OracleNet& net,
                                              const DatasetManifest& manifest,
                                              const RunConfig& config);

void write_report_json(const std::vector<MetricRecord>& records, const std::string& path);
/// Per-sample rows, columns in the tabulated order:
/// sample_id,class,dice,hd95,asd,iou,acc,pre,sen,spe
void write_report_csv(const std::vector<MetricRecord>& records, const std::string& path);
/// Per-class means (hd95/asd averaged over defined samples only).
void write_aggregate_csv(const std::vector<MetricRecord>& records, const std::string& path);

double mean_foreground_dice(const std::vector<MetricRecord>& records);

/// The deterministic train/eval split used by the training engine.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double eval_fraction, std::uint64_t seed);

// ---- rendering ----

/// Grayscale PGM of W (0 -> black, 1 -> white) at image resolution, or a
/// 50%-opacity red overlay PPM blend when an image is supplied.
void render_map(const ImportanceMap& map, const std::optional<Tensor>& image,
                const std::string& out_path);

}  // namespace sagekeep
