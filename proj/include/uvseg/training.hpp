#pragma once

// Losses, the Adam optimiser with cosine decay, the freeze-aware training
// loop, model selection and hyper-parameter grid search.

#include "uvseg/checkpoint.hpp"
#include "uvseg/model.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace uvs::training {

using ag::Var;

inline constexpr double prob_clamp = 1e-7;

enum class MseTarget { mask, quality };
enum class SegLossScope { joint, head };

struct LossConfig {
    double lambda = 1.0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double dice_smooth = 1.0;
    MseTarget mse_target = MseTarget::mask;
    SegLossScope seg_scope = SegLossScope::joint;

    void validate() const;
};

struct TrainConfig {
    double lr = 5e-3;
    double weight_decay = 1e-3;
    std::size_t batch_size = 4;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    double min_lr = 0.0; // cosine floor

    void validate() const;
};

struct GridSearchSpace {
    std::vector<double> lr_grid;
    std::vector<double> wd_grid;
    std::vector<double> lambda_grid;

    void validate() const;
    std::size_t size() const noexcept { return lr_grid.size() * wd_grid.size() * lambda_grid.size(); }
    static GridSearchSpace standard();
};

nlohmann::json to_json(const LossConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const GridSearchSpace& s);
LossConfig loss_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
GridSearchSpace grid_space_from_json(const nlohmann::json& j);

/// Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t, where p_t is the
/// (clamped) probability of the true class and alpha_t is alpha for
/// foreground pixels and 1 - alpha for background pixels.
Var focal_loss(const Var& probs, const Tensor& gt, double gamma, double alpha);
/// 1 - (2 sum(p g) + smooth) / (sum p + sum g + smooth).
Var dice_loss(const Var& probs, const Tensor& gt, double smooth);
/// Mean of (p - g)^2.
Var mse_loss(const Var& probs, const Tensor& gt);
/// Mean two-class softmax cross-entropy of 2 x H x W logits against an H x W 0/1 target.
Var cross_entropy(const Var& logits, const Tensor& gt);

struct LossBreakdown {
    double focal = 0.0, dice = 0.0, mse = 0.0; // generalist terms
    double ce = 0.0;                          // specialist term
    double total = 0.0;

    LossBreakdown& operator+=(const LossBreakdown& o);
    LossBreakdown scaled(double s) const;
};

struct LossResult {
    Var total;
    LossBreakdown terms;
};

/// total = lambda (focal + dice + mse) + ce. `sam_probs` may be undefined
/// (no generalist), leaving total = ce. `quality` is the selected predicted
/// IoU (1 x 1) used when the MSE target is the quality score.
LossResult total_loss(const Var& sam_probs, const Var& coarse_logits, const Tensor& gt, const LossConfig& cfg,
                      const Var& quality = {});

/// lr_t = min_lr + (lr - min_lr) (1 + cos(pi t / T)) / 2.
double cosine_lr(double lr, double min_lr, std::size_t step, std::size_t total_steps);

/// Adam with L2 weight decay added to the gradient. Only parameters that
/// require a gradient are updated.
class Adam {
public:
    explicit Adam(nn::ParamStore& params, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);
    void step(double lr);
    std::size_t steps() const noexcept { return t_; }

    void save_state(ckpt::Checkpoint& ckpt) const;
    void load_state(const ckpt::Checkpoint& ckpt);

private:
    nn::ParamStore& params_;
    double wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

struct Sample {
    geodata::ImageTile tile;
    BinaryMask mask;
};

/// Loads every manifest entry with its mask; InvalidInput when a mask is missing.
std::vector<Sample> load_samples(const geodata::DatasetManifest& manifest);

struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    LossBreakdown loss; // batch mean
};

/// Micro IoU of the model's final masks against the samples' masks.
double dataset_iou(const model::UvSam& model, const std::vector<Sample>& samples,
                   std::map<const Sample*, generalist::ImageEmbedding>* cache = nullptr);

class Trainer {
public:
    Trainer(model::UvSam& model, TrainConfig tcfg, LossConfig lcfg, std::size_t total_steps);

    /// One optimiser step on the batch (per-sample losses averaged). Throws
    /// NumericalError when a loss is not finite.
    StepRecord train_step(const std::vector<const Sample*>& batch);

    LossResult sample_loss(const Sample& s);
    std::size_t step() const noexcept { return step_; }
    double current_lr() const;
    Adam& optimizer() noexcept { return adam_; }
    std::map<const Sample*, generalist::ImageEmbedding>& embedding_cache() noexcept { return cache_; }

private:
    model::UvSam& model_;
    TrainConfig tcfg_;
    LossConfig lcfg_;
    std::size_t total_steps_;
    std::size_t step_ = 0;
    Adam adam_;
    std::map<const Sample*, generalist::ImageEmbedding> cache_;
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t step = 0; // optimiser steps completed
    double lr = 0.0;      // lr of the epoch's last step
    LossBreakdown loss;   // mean over the epoch's steps
    double train_iou = 0.0;
    double val_iou = 0.0;
};

struct FitOptions {
    std::filesystem::path checkpoint; // best checkpoint, empty = not written
    std::filesystem::path history_csv;
    std::size_t max_steps = 0; // 0 = epochs * batches per epoch
    bool track_train_iou = true;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
    std::vector<EpochRecord> history;
    std::vector<StepRecord> steps;
    std::size_t best_epoch = 0;
    double best_val_iou = -1.0;
    double final_train_iou = 0.0; // with the best weights restored
};

/// Trains, selecting the epoch with the highest validation IoU (training IoU
/// when `val` is empty), and leaves the best weights in the model.
FitResult fit(model::UvSam& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& tcfg, const LossConfig& lcfg, const FitOptions& opts = {});

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

/// Checkpoint holding the trainable parameters ("trainable."), optimiser
/// state, configs and the generalist's parameter hash.
ckpt::Checkpoint make_checkpoint(const model::UvSam& model, const TrainConfig& tcfg, const LossConfig& lcfg,
                                 const Adam* adam = nullptr, std::size_t epoch = 0);

/// Rebuilds a model from a training checkpoint. ArtifactMismatch when the
/// generalist does not hash to the recorded value or a tensor is missing.
model::UvSam load_model(const std::filesystem::path& path,
                        std::shared_ptr<const generalist::PromptableSegmenter> gen = nullptr);

struct Trial {
    std::size_t index = 0; // lr-major enumeration order
    double lr = 0.0, weight_decay = 0.0, lambda = 0.0;
    bool ok = false;
    std::string error;
    double val_iou = 0.0;
    std::size_t best_epoch = 0;
    std::size_t rank = 0;
};

/// Runs every (lr, wd, lambda) combination with a fresh model and returns the
/// trials best first by validation IoU (ties keep enumeration order, failed
/// trials last).
std::vector<Trial> grid_search(const GridSearchSpace& space, const model::ModelConfig& mcfg,
                               const std::vector<Sample>& train, const std::vector<Sample>& val,
                               const TrainConfig& base, const LossConfig& base_loss, const FitOptions& opts = {},
                               std::shared_ptr<const generalist::PromptableSegmenter> gen = nullptr);

/// Class-agnostic promptable pretraining of the stand-in generalist on
/// synthetic object scenes (random shapes with distractors, no urban-village
/// texture). Each example carries a jittered box prompt, a noisy partly
/// block-coarsened mask prompt, or both.
struct PretrainConfig {
    std::size_t steps = 600;
    double lr = 3e-3;
    std::size_t batch_size = 4;
    std::size_t num_tiles = 256;
    std::uint64_t tile_seed = 5000;
    std::uint64_t seed = 7;
    bool train_encoder = true;

    void validate() const;
};

nlohmann::json to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);

struct PretrainRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double iou = 0.0; // batch mean
};

/// Trains every parameter of `model`, then freezes it again.
std::vector<PretrainRecord> pretrain_generalist(generalist::TinyPromptable& model, const PretrainConfig& cfg,
                                                const std::function<void(const PretrainRecord&)>& progress = {});

/// Loads `cache` when it holds a generalist pretrained with exactly this
/// configuration, otherwise pretrains one and writes it there (empty path: no cache).
std::shared_ptr<generalist::TinyPromptable> pretrained_generalist(const generalist::GeneralistConfig& gcfg,
                                                                  const PretrainConfig& pcfg,
                                                                  const std::filesystem::path& cache = {});

} // namespace uvs::training
