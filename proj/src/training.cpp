#include "uvseg/training.hpp"

#include "uvseg/error.hpp"
#include "uvseg/evaluation.hpp"
#include "uvseg/json_util.hpp"
#include "uvseg/preprocess.hpp"
#include "uvseg/prompting.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace uvs::training {

using ag::Node;

// ---------------------------------------------------------------------------
// Configuration

void LossConfig::validate() const
{
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite value >= 0");
    if (!(focal_gamma >= 0.0)) throw ConfigError("focal_gamma must be >= 0");
    if (!(focal_alpha > 0.0 && focal_alpha < 1.0)) throw ConfigError("focal_alpha must lie in (0, 1)");
    if (!(dice_smooth > 0.0)) throw ConfigError("dice_smooth must be positive");
}

void TrainConfig::validate() const
{
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (!(min_lr >= 0.0) || min_lr > lr) throw ConfigError("min_lr must lie in [0, lr]");
}

void GridSearchSpace::validate() const
{
    if (lr_grid.empty() || wd_grid.empty() || lambda_grid.empty())
        throw ConfigError("grid search lists must be non-empty");
}

GridSearchSpace GridSearchSpace::standard()
{
    return {{0.005, 0.0005, 0.00005}, {0.01, 0.001}, {0.1, 1.0, 10.0}};
}

namespace {

const char* mse_target_name(MseTarget t) { return t == MseTarget::mask ? "mask" : "quality"; }
const char* scope_name(SegLossScope s) { return s == SegLossScope::joint ? "joint" : "head"; }

} // namespace

nlohmann::json to_json(const LossConfig& c)
{
    return {{"lambda", c.lambda},           {"focal_gamma", c.focal_gamma},
            {"focal_alpha", c.focal_alpha}, {"dice_smooth", c.dice_smooth},
            {"mse_target", mse_target_name(c.mse_target)}, {"seg_loss_scope", scope_name(c.seg_scope)}};
}

nlohmann::json to_json(const TrainConfig& c)
{
    return {{"lr", c.lr},         {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size},
            {"epochs", c.epochs}, {"seed", c.seed},                 {"min_lr", c.min_lr}};
}

nlohmann::json to_json(const GridSearchSpace& s)
{
    return {{"lr_grid", s.lr_grid}, {"wd_grid", s.wd_grid}, {"lambda_grid", s.lambda_grid}};
}

LossConfig loss_config_from_json(const nlohmann::json& j)
{
    const std::string where = "loss";
    reject_unknown_keys(j, {"lambda", "focal_gamma", "focal_alpha", "dice_smooth", "mse_target", "seg_loss_scope"},
                        where);
    LossConfig c;
    read_field(j, "lambda", c.lambda, where);
    read_field(j, "focal_gamma", c.focal_gamma, where);
    read_field(j, "focal_alpha", c.focal_alpha, where);
    read_field(j, "dice_smooth", c.dice_smooth, where);
    std::string target = mse_target_name(c.mse_target), scope = scope_name(c.seg_scope);
    read_field(j, "mse_target", target, where);
    read_field(j, "seg_loss_scope", scope, where);
    if (target == "mask") c.mse_target = MseTarget::mask;
    else if (target == "quality") c.mse_target = MseTarget::quality;
    else throw ConfigError("loss.mse_target must be 'mask' or 'quality'");
    if (scope == "joint") c.seg_scope = SegLossScope::joint;
    else if (scope == "head") c.seg_scope = SegLossScope::head;
    else throw ConfigError("loss.seg_loss_scope must be 'joint' or 'head'");
    c.validate();
    return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j)
{
    const std::string where = "train";
    reject_unknown_keys(j, {"lr", "weight_decay", "batch_size", "epochs", "seed", "min_lr", "schedule"}, where);
    TrainConfig c;
    read_field(j, "lr", c.lr, where);
    read_field(j, "weight_decay", c.weight_decay, where);
    read_field(j, "batch_size", c.batch_size, where);
    read_field(j, "epochs", c.epochs, where);
    read_field(j, "seed", c.seed, where);
    read_field(j, "min_lr", c.min_lr, where);
    std::string schedule = "cosine";
    read_field(j, "schedule", schedule, where);
    if (schedule != "cosine") throw ConfigError("train.schedule: only 'cosine' is supported");
    c.validate();
    return c;
}

GridSearchSpace grid_space_from_json(const nlohmann::json& j)
{
    const std::string where = "grid_search";
    reject_unknown_keys(j, {"lr_grid", "wd_grid", "lambda_grid"}, where);
    GridSearchSpace s = GridSearchSpace::standard();
    read_field(j, "lr_grid", s.lr_grid, where);
    read_field(j, "wd_grid", s.wd_grid, where);
    read_field(j, "lambda_grid", s.lambda_grid, where);
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

void require_match(const Var& probs, const Tensor& gt, const char* what)
{
    if (!probs.defined() || probs.shape() != gt.shape())
        throw InvalidInput(std::string(what) + ": prediction " +
                           (probs.defined() ? shape_str(probs.shape()) : std::string("none")) +
                           " and target " + shape_str(gt.shape()) + " differ in shape");
}

double clamp_prob(double p) { return std::clamp(p, prob_clamp, 1.0 - prob_clamp); }

} // namespace

Var focal_loss(const Var& probs, const Tensor& gt, double gamma, double alpha)
{
    require_match(probs, gt, "focal_loss");
    const std::size_t n = gt.size();
    const Tensor& p = probs.value();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = gt[i] > 0.5;
        const double c = clamp_prob(p[i]);
        const double pt = pos ? c : 1.0 - c;
        const double at = pos ? alpha : 1.0 - alpha;
        total += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    return ag::make_op(Tensor::scalar(total / static_cast<double>(n)), {probs}, "focal_loss",
                       [gt, gamma, alpha, n](Node& node) {
                           const Tensor& p = node.inputs[0]->value;
                           Tensor& g = node.inputs[0]->grad_buffer();
                           const double up = node.grad[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                               if (p[i] < prob_clamp || p[i] > 1.0 - prob_clamp) continue;
                               const bool pos = gt[i] > 0.5;
                               const double pt = pos ? p[i] : 1.0 - p[i];
                               const double at = pos ? alpha : 1.0 - alpha;
                               const double q = 1.0 - pt;
                               double d = -at * std::pow(q, gamma) / pt;
                               if (gamma != 0.0) d += at * gamma * std::pow(q, gamma - 1.0) * std::log(pt);
                               g[i] += up * (pos ? d : -d);
                           }
                       });
}

Var dice_loss(const Var& probs, const Tensor& gt, double smooth)
{
    require_match(probs, gt, "dice_loss");
    const Tensor& p = probs.value();
    double spg = 0.0, sp = 0.0, sg = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        spg += p[i] * gt[i];
        sp += p[i];
        sg += gt[i];
    }
    const double num = 2.0 * spg + smooth, den = sp + sg + smooth;
    return ag::make_op(Tensor::scalar(1.0 - num / den), {probs}, "dice_loss", [gt, num, den](Node& node) {
        Tensor& g = node.inputs[0]->grad_buffer();
        const double up = node.grad[0];
        for (std::size_t i = 0; i < gt.size(); ++i) g[i] -= up * (2.0 * gt[i] * den - num) / (den * den);
    });
}

Var mse_loss(const Var& probs, const Tensor& gt)
{
    require_match(probs, gt, "mse_loss");
    const Tensor& p = probs.value();
    const std::size_t n = gt.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += (p[i] - gt[i]) * (p[i] - gt[i]);
    return ag::make_op(Tensor::scalar(total / static_cast<double>(n)), {probs}, "mse_loss", [gt, n](Node& node) {
        const Tensor& p = node.inputs[0]->value;
        Tensor& g = node.inputs[0]->grad_buffer();
        const double up = 2.0 * node.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) g[i] += up * (p[i] - gt[i]);
    });
}

Var cross_entropy(const Var& logits, const Tensor& gt)
{
    if (!logits.defined() || logits.value().rank() != 3 || logits.dim(0) != 2 || gt.rank() != 2 ||
        logits.dim(1) != gt.dim(0) || logits.dim(2) != gt.dim(1))
        throw InvalidInput("cross_entropy: expected 2 x H x W logits and an H x W target, got " +
                           (logits.defined() ? shape_str(logits.shape()) : std::string("none")) + " and " +
                           shape_str(gt.shape()));
    const std::size_t n = gt.size();
    const Tensor& z = logits.value();
    Tensor prob1(Shape{n});
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z0 = z[i], z1 = z[n + i];
        const double m = std::max(z0, z1);
        const double lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
        total += lse - (gt[i] > 0.5 ? z1 : z0);
        prob1[i] = std::exp(z1 - lse);
    }
    return ag::make_op(Tensor::scalar(total / static_cast<double>(n)), {logits}, "cross_entropy",
                       [gt, n, prob1](Node& node) {
                           Tensor& g = node.inputs[0]->grad_buffer();
                           const double up = node.grad[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                               const double y = gt[i] > 0.5 ? 1.0 : 0.0;
                               const double d = prob1[i] - y; // d/dz1; d/dz0 = -d
                               g[i] -= up * d;
                               g[n + i] += up * d;
                           }
                       });
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o)
{
    focal += o.focal;
    dice += o.dice;
    mse += o.mse;
    ce += o.ce;
    total += o.total;
    return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const
{
    return {focal * s, dice * s, mse * s, ce * s, total * s};
}

LossResult total_loss(const Var& sam_probs, const Var& coarse_logits, const Tensor& gt, const LossConfig& cfg,
                      const Var& quality)
{
    LossResult r;
    Var ce = cross_entropy(coarse_logits, gt);
    r.terms.ce = ce.value()[0];
    if (!sam_probs.defined()) {
        r.total = ce;
        r.terms.total = r.terms.ce;
        return r;
    }
    Var focal = focal_loss(sam_probs, gt, cfg.focal_gamma, cfg.focal_alpha);
    Var dice = dice_loss(sam_probs, gt, cfg.dice_smooth);
    Var mse;
    if (cfg.mse_target == MseTarget::mask) {
        mse = mse_loss(sam_probs, gt);
    } else {
        if (!quality.defined()) throw InvalidInput("quality MSE target needs the predicted quality score");
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            const bool a = sam_probs.value()[i] > 0.5, b = gt[i] > 0.5;
            inter += (a && b) ? 1 : 0;
            uni += (a || b) ? 1 : 0;
        }
        const double iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
        mse = mse_loss(quality, Tensor(quality.shape(), iou));
    }
    r.terms.focal = focal.value()[0];
    r.terms.dice = dice.value()[0];
    r.terms.mse = mse.value()[0];
    r.total = ag::add(ag::scale(ag::add(ag::add(focal, dice), mse), cfg.lambda), ce);
    r.terms.total = r.total.value()[0];
    return r;
}

double cosine_lr(double lr, double min_lr, std::size_t step, std::size_t total_steps)
{
    if (total_steps == 0) return lr;
    const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(nn::ParamStore& params, double weight_decay, double beta1, double beta2, double eps)
    : params_(params), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps)
{
    for (const auto& [name, v] : params_.entries()) {
        m_.emplace_back(v.shape());
        v_.emplace_back(v.shape());
    }
}

void Adam::step(double lr)
{
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.entries().size(); ++k) {
        Var p = params_.entries()[k].second;
        if (!p.requires_grad()) continue;
        Tensor& w = p.mutable_value();
        const bool has = p.has_grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = (has ? p.grad()[i] : 0.0) + wd_ * w[i];
            m_[k][i] = b1_ * m_[k][i] + (1.0 - b1_) * g;
            v_[k][i] = b2_ * v_[k][i] + (1.0 - b2_) * g * g;
            w[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
        }
    }
}

void Adam::save_state(ckpt::Checkpoint& ckpt) const
{
    ckpt.meta["adam"] = {{"step", t_}, {"beta1", b1_}, {"beta2", b2_}, {"eps", eps_}, {"weight_decay", wd_}};
    for (std::size_t k = 0; k < m_.size(); ++k) {
        ckpt.add("adam.m." + params_.entries()[k].first, m_[k]);
        ckpt.add("adam.v." + params_.entries()[k].first, v_[k]);
    }
}

void Adam::load_state(const ckpt::Checkpoint& ckpt)
{
    if (!ckpt.meta.contains("adam")) throw ArtifactMismatch("checkpoint holds no optimiser state");
    for (std::size_t k = 0; k < m_.size(); ++k) {
        const std::string& name = params_.entries()[k].first;
        const Tensor* m = ckpt.find("adam.m." + name);
        const Tensor* v = ckpt.find("adam.v." + name);
        if (!m || !v || m->shape() != m_[k].shape() || v->shape() != v_[k].shape())
            throw ArtifactMismatch("optimiser state for " + name + " is missing or has the wrong shape");
        m_[k] = *m;
        v_[k] = *v;
    }
    t_ = ckpt.meta["adam"].at("step").get<std::size_t>();
}

// ---------------------------------------------------------------------------
// Data and evaluation

std::vector<Sample> load_samples(const geodata::DatasetManifest& manifest)
{
    std::vector<Sample> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        if (!e.mask) throw InvalidInput("manifest entry " + e.tile_id + " has no mask");
        Sample s;
        s.tile = geodata::load_tile(manifest, e);
        s.mask = geodata::load_mask(manifest, e, s.tile.pixels.height, s.tile.pixels.width).mask;
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

Tensor mask_target(const BinaryMask& m)
{
    return mask_to_tensor(m).reshaped({m.height, m.width});
}

const generalist::ImageEmbedding* cached_embedding(const model::UvSam& model, const Sample& s,
                                                   std::map<const Sample*, generalist::ImageEmbedding>* cache)
{
    if (!model.generalist() || !cache) return nullptr;
    auto it = cache->find(&s);
    if (it == cache->end()) it = cache->emplace(&s, model.embed_image(s.tile)).first;
    return &it->second;
}

} // namespace

double dataset_iou(const model::UvSam& model, const std::vector<Sample>& samples,
                   std::map<const Sample*, generalist::ImageEmbedding>* cache)
{
    std::vector<BinaryMask> preds, gts;
    for (const Sample& s : samples) {
        preds.push_back(model.forward(s.tile, cached_embedding(model, s, cache)).final_mask());
        gts.push_back(s.mask);
    }
    return evaluation::micro_iou(preds, gts);
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(model::UvSam& model, TrainConfig tcfg, LossConfig lcfg, std::size_t total_steps)
    : model_(model), tcfg_(tcfg), lcfg_(lcfg), total_steps_(total_steps),
      adam_(model.trainable(), tcfg.weight_decay)
{
    tcfg_.validate();
    lcfg_.validate();
}

double Trainer::current_lr() const
{
    return cosine_lr(tcfg_.lr, tcfg_.min_lr, step_, total_steps_);
}

LossResult Trainer::sample_loss(const Sample& s)
{
    if (s.mask.height != s.tile.pixels.height || s.mask.width != s.tile.pixels.width)
        throw InvalidInput("mask of " + s.tile.tile_id + " does not match its tile");
    const model::ForwardResult fr = model_.forward(s.tile, cached_embedding(model_, s, &cache_));
    const Tensor gt = mask_target(s.mask);
    Var coarse_logits = fr.coarse.logits;
    if (lcfg_.seg_scope == SegLossScope::head)
        coarse_logits = model_.specialist().predict_coarse({ag::detach(fr.aggregated)}).logits;
    Var probs, quality;
    if (fr.refined) {
        probs = ag::sigmoid(fr.final_logits);
        const std::size_t h = fr.refined->selected_head;
        quality = ag::slice_rows(ag::transpose(fr.refined->quality), h, h + 1);
    }
    return total_loss(probs, coarse_logits, gt, lcfg_, quality);
}

StepRecord Trainer::train_step(const std::vector<const Sample*>& batch)
{
    if (batch.empty()) throw InvalidInput("empty training batch");
    StepRecord rec;
    rec.step = step_;
    rec.lr = current_lr();
    const double inv = 1.0 / static_cast<double>(batch.size());
    model_.trainable().zero_grad();
    for (const Sample* s : batch) {
        LossResult loss = sample_loss(*s);
        if (!std::isfinite(loss.terms.total))
            throw NumericalError("non-finite loss at step " + std::to_string(step_) + " on tile " + s->tile.tile_id +
                                 " (focal " + std::to_string(loss.terms.focal) + ", dice " +
                                 std::to_string(loss.terms.dice) + ", mse " + std::to_string(loss.terms.mse) +
                                 ", ce " + std::to_string(loss.terms.ce) + ")");
        ag::backward(ag::scale(loss.total, inv));
        rec.loss += loss.terms.scaled(inv);
    }
    adam_.step(rec.lr);
    model_.trainable().zero_grad();
    ++step_;
    return rec;
}

// ---------------------------------------------------------------------------
// Checkpoints

ckpt::Checkpoint make_checkpoint(const model::UvSam& model, const TrainConfig& tcfg, const LossConfig& lcfg,
                                 const Adam* adam, std::size_t epoch)
{
    ckpt::Checkpoint ck;
    ck.meta["kind"] = "uvsam";
    ck.meta["model"] = model::to_json(model.config());
    ck.meta["train"] = to_json(tcfg);
    ck.meta["loss"] = to_json(lcfg);
    ck.meta["seed"] = tcfg.seed;
    ck.meta["epoch"] = epoch;
    if (model.generalist()) ck.meta["generalist_sha256"] = model.generalist()->params().sha256();
    ckpt::add_store(ck, "trainable.", model.trainable());
    if (adam) adam->save_state(ck);
    return ck;
}

model::UvSam load_model(const std::filesystem::path& path, std::shared_ptr<const generalist::PromptableSegmenter> gen)
{
    const ckpt::Checkpoint ck = ckpt::load(path);
    if (ck.meta.value("kind", "") != "uvsam" || !ck.meta.contains("model"))
        throw ArtifactMismatch(path.string() + " is not a model checkpoint");
    model::ModelConfig cfg;
    try {
        cfg = model::model_config_from_json(ck.meta["model"]);
    } catch (const ConfigError& e) {
        throw ArtifactMismatch(std::string("checkpoint model record: ") + e.what());
    }
    model::UvSam m(cfg, std::move(gen));
    if (m.generalist()) {
        const std::string want = ck.meta.value("generalist_sha256", "");
        const std::string have = m.generalist()->params().sha256();
        if (want != have)
            throw ArtifactMismatch("generalist weights hash " + have + " does not match the checkpoint's " + want);
    }
    ckpt::load_store(ck, "trainable.", m.trainable());
    return m;
}

// ---------------------------------------------------------------------------
// fit / grid search

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(12);
    out << "epoch,step,lr,focal,dice,mse,ce,total,train_iou,val_iou\n";
    for (const auto& e : history)
        out << e.epoch << ',' << e.step << ',' << e.lr << ',' << e.loss.focal << ',' << e.loss.dice << ','
            << e.loss.mse << ',' << e.loss.ce << ',' << e.loss.total << ',' << e.train_iou << ',' << e.val_iou << '\n';
}

FitResult fit(model::UvSam& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& tcfg, const LossConfig& lcfg, const FitOptions& opts)
{
    if (train.empty()) throw InvalidInput("training set is empty");
    tcfg.validate();
    lcfg.validate();
    const std::size_t per_epoch = (train.size() + tcfg.batch_size - 1) / tcfg.batch_size;
    std::size_t total = per_epoch * tcfg.epochs;
    if (opts.max_steps > 0) total = std::min(total, opts.max_steps);

    Trainer trainer(model, tcfg, lcfg, total);
    Rng rng(tcfg.seed ^ 0x66697421ULL);
    FitResult res;
    std::vector<Tensor> best;
    auto snapshot = [&] {
        best.clear();
        for (const auto& [name, v] : model.trainable().entries()) best.push_back(v.value());
    };
    std::map<const Sample*, generalist::ImageEmbedding> val_cache;

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 0; epoch < tcfg.epochs && trainer.step() < total; ++epoch) {
        rng.shuffle(order);
        EpochRecord er;
        er.epoch = epoch;
        std::size_t steps = 0;
        for (std::size_t b = 0; b < order.size() && trainer.step() < total; b += tcfg.batch_size) {
            std::vector<const Sample*> batch;
            for (std::size_t k = b; k < std::min(order.size(), b + tcfg.batch_size); ++k)
                batch.push_back(&train[order[k]]);
            StepRecord sr = trainer.train_step(batch);
            er.loss += sr.loss;
            er.lr = sr.lr;
            res.steps.push_back(sr);
            ++steps;
        }
        er.loss = er.loss.scaled(1.0 / static_cast<double>(std::max<std::size_t>(steps, 1)));
        er.step = trainer.step();
        if (opts.track_train_iou || val.empty()) er.train_iou = dataset_iou(model, train, &trainer.embedding_cache());
        er.val_iou = val.empty() ? er.train_iou : dataset_iou(model, val, &val_cache);
        if (er.val_iou > res.best_val_iou) {
            res.best_val_iou = er.val_iou;
            res.best_epoch = epoch;
            snapshot();
            if (!opts.checkpoint.empty())
                ckpt::save(opts.checkpoint, make_checkpoint(model, tcfg, lcfg, &trainer.optimizer(), epoch));
        }
        res.history.push_back(er);
        if (opts.on_epoch) opts.on_epoch(er);
    }
    for (std::size_t k = 0; k < best.size(); ++k) {
        Var v = model.trainable().entries()[k].second;
        v.mutable_value() = best[k];
    }
    res.final_train_iou = dataset_iou(model, train, &trainer.embedding_cache());
    if (!opts.history_csv.empty()) write_history_csv(opts.history_csv, res.history);
    return res;
}

std::vector<Trial> grid_search(const GridSearchSpace& space, const model::ModelConfig& mcfg,
                               const std::vector<Sample>& train, const std::vector<Sample>& val,
                               const TrainConfig& base, const LossConfig& base_loss, const FitOptions& opts,
                               std::shared_ptr<const generalist::PromptableSegmenter> gen)
{
    space.validate();
    if (mcfg.ablation.use_generalist && !gen) gen = std::make_shared<generalist::TinyPromptable>(mcfg.generalist);
    std::vector<Trial> trials;
    for (double lr : space.lr_grid)
        for (double wd : space.wd_grid)
            for (double lambda : space.lambda_grid) {
                Trial t;
                t.index = trials.size();
                t.lr = lr;
                t.weight_decay = wd;
                t.lambda = lambda;
                try {
                    TrainConfig tc = base;
                    tc.lr = lr;
                    tc.weight_decay = wd;
                    tc.min_lr = std::min(tc.min_lr, lr);
                    LossConfig lc = base_loss;
                    lc.lambda = lambda;
                    model::UvSam m(mcfg, gen);
                    FitOptions fo = opts;
                    fo.checkpoint.clear();
                    fo.history_csv.clear();
                    const FitResult r = fit(m, train, val, tc, lc, fo);
                    t.ok = true;
                    t.val_iou = r.best_val_iou;
                    t.best_epoch = r.best_epoch;
                } catch (const std::exception& e) {
                    t.ok = false;
                    t.error = e.what();
                }
                trials.push_back(std::move(t));
            }
    std::vector<Trial> ranked = trials;
    std::stable_sort(ranked.begin(), ranked.end(), [](const Trial& a, const Trial& b) {
        if (a.ok != b.ok) return a.ok;
        return a.ok && a.val_iou > b.val_iou;
    });
    for (std::size_t i = 0; i < ranked.size(); ++i) ranked[i].rank = i + 1;
    return ranked;
}

// ---------------------------------------------------------------------------
// Generalist pretraining

void PretrainConfig::validate() const
{
    if (steps == 0 || batch_size == 0 || num_tiles == 0) throw ConfigError("pretrain steps, batch and tiles must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("pretrain lr must be positive");
}

nlohmann::json to_json(const PretrainConfig& c)
{
    return {{"steps", c.steps},         {"lr", c.lr},     {"batch_size", c.batch_size},
            {"num_tiles", c.num_tiles}, {"tile_seed", c.tile_seed}, {"seed", c.seed},
            {"train_encoder", c.train_encoder}};
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j)
{
    const std::string where = "pretrain";
    reject_unknown_keys(j, {"steps", "lr", "batch_size", "num_tiles", "tile_seed", "seed", "train_encoder"}, where);
    PretrainConfig c;
    read_field(j, "steps", c.steps, where);
    read_field(j, "lr", c.lr, where);
    read_field(j, "batch_size", c.batch_size, where);
    read_field(j, "num_tiles", c.num_tiles, where);
    read_field(j, "tile_seed", c.tile_seed, where);
    read_field(j, "seed", c.seed, where);
    read_field(j, "train_encoder", c.train_encoder, where);
    c.validate();
    return c;
}

namespace {

BoxSet jittered_boxes(const BinaryMask& m, Rng& rng)
{
    BoxSet boxes = prompting::extract_boxes(m, 1, 8);
    const long h = static_cast<long>(m.height), w = static_cast<long>(m.width);
    for (Box& b : boxes.boxes) {
        b.x_min = std::max(0L, b.x_min - static_cast<long>(rng.uniform_int(0, 2)));
        b.y_min = std::max(0L, b.y_min - static_cast<long>(rng.uniform_int(0, 2)));
        b.x_max = std::min(w, b.x_max + static_cast<long>(rng.uniform_int(0, 2)));
        b.y_max = std::min(h, b.y_max + static_cast<long>(rng.uniform_int(0, 2)));
    }
    return boxes;
}

// Logit map resembling a specialist's coarse mask: each 4x4 block is either
// exact or majority-coarsened, a few blocks are flipped, and noise is added.
Tensor simulated_mask_prompt(const BinaryMask& m, Rng& rng)
{
    constexpr std::size_t block = 4;
    const std::size_t h = m.height, w = m.width;
    Tensor t({1, h, w});
    const double scale = rng.uniform(2.0, 8.0);
    for (std::size_t by = 0; by < h; by += block)
        for (std::size_t bx = 0; bx < w; bx += block) {
            const std::size_t ye = std::min(h, by + block), xe = std::min(w, bx + block);
            std::size_t on = 0, n = 0;
            for (std::size_t y = by; y < ye; ++y)
                for (std::size_t x = bx; x < xe; ++x) {
                    on += m.at(y, x);
                    ++n;
                }
            const bool coarse = rng.uniform() < 0.5;
            const bool flip = rng.uniform() < 0.05;
            for (std::size_t y = by; y < ye; ++y)
                for (std::size_t x = bx; x < xe; ++x) {
                    double v = coarse ? (2 * on >= n ? 1.0 : -1.0) : (m.at(y, x) ? 1.0 : -1.0);
                    if (flip) v = -v;
                    t[y * w + x] = scale * v + 0.5 * rng.normal();
                }
        }
    return t;
}

// Class-agnostic pretraining scene: textured background with two to five
// random rectangles and ellipses; the target is one of them, the rest are
// distractors that only the prompts can rule out.
Sample object_tile(std::size_t side, std::uint64_t seed)
{
    Rng rng(seed);
    Sample s;
    s.tile.pixels = RgbImage(side, side);
    s.tile.tile_id = "object_" + std::to_string(seed);
    s.mask = BinaryMask(side, side);
    const double n = static_cast<double>(side);
    std::array<double, 3> bg{rng.uniform(40, 215), rng.uniform(40, 215), rng.uniform(40, 215)};
    std::vector<std::uint8_t> owner(side * side, 0);
    std::vector<std::array<double, 3>> colour{bg};
    std::vector<double> stripes{0.0};
    const int count = static_cast<int>(rng.uniform_int(2, 5));
    for (int k = 1; k <= count; ++k) {
        colour.push_back({rng.uniform(0, 255), rng.uniform(0, 255), rng.uniform(0, 255)});
        stripes.push_back(rng.uniform() < 0.5 ? rng.uniform(2, 5) : 0.0);
        const bool ellipse = rng.uniform() < 0.5;
        const double w = rng.uniform(0.12, 0.45) * n, h = rng.uniform(0.12, 0.45) * n;
        const double x0 = rng.uniform(0, n - w), y0 = rng.uniform(0, n - h);
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                bool in = px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
                if (ellipse) {
                    const double dx = (px - x0 - w / 2) / (w / 2), dy = (py - y0 - h / 2) / (h / 2);
                    in = dx * dx + dy * dy <= 1.0;
                }
                if (in) owner[y * side + x] = static_cast<std::uint8_t>(k);
            }
    }
    // the target is a random object that survived occlusion
    std::vector<int> visible;
    for (int k = 1; k <= count; ++k)
        if (std::count(owner.begin(), owner.end(), static_cast<std::uint8_t>(k)) >= 16) visible.push_back(k);
    const int target = visible.empty() ? -1 : visible[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(visible.size()) - 1))];
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const int k = owner[y * side + x];
            const double band = stripes[k] > 0 && static_cast<int>(static_cast<double>(x + y) / stripes[k]) % 2 ? 0.7 : 1.0;
            for (int c = 0; c < 3; ++c) {
                const double v = colour[k][c] * band + 12.0 * rng.normal();
                s.tile.pixels.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
            s.mask.at(y, x) = k == target ? 1 : 0;
        }
    return s;
}

} // namespace

std::vector<PretrainRecord> pretrain_generalist(generalist::TinyPromptable& model, const PretrainConfig& cfg,
                                                const std::function<void(const PretrainRecord&)>& progress)
{
    cfg.validate();
    const std::size_t side = model.config().tile_size;
    std::vector<Sample> data;
    for (std::size_t i = 0; i < cfg.num_tiles; ++i) data.push_back(object_tile(side, cfg.tile_seed + i));
    std::vector<Tensor> images;
    for (const Sample& s : data) images.push_back(image_to_tensor(s.tile.pixels));

    model.params().set_trainable(true);
    Adam adam(model.params(), 0.0);
    Rng rng(cfg.seed);
    LossConfig lc;
    std::vector<PretrainRecord> log;
    try {
        for (std::size_t step = 0; step < cfg.steps; ++step) {
            PretrainRecord rec;
            rec.step = step;
            const double inv = 1.0 / static_cast<double>(cfg.batch_size);
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                const std::size_t k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(data.size()) - 1));
                const Sample& s = data[k];
                // at least one prompt source per example, as in promptable pretraining
                const double u = rng.uniform();
                BoxSet boxes;
                if (u < 0.7) boxes = jittered_boxes(s.mask, rng);
                std::optional<Var> mask;
                if (u >= 0.4) mask = Var::constant(simulated_mask_prompt(s.mask, rng));

                Var image = Var::constant(images[k]);
                Var features = model.encode_image_graph(image);
                if (!cfg.train_encoder) features = ag::detach(features);
                auto [sparse, dense] = model.encode_prompts(boxes, mask);
                MixedPrompt prompt;
                prompt.tokens = sparse.tokens;
                prompt.provenance = sparse.provenance;
                const generalist::MaskLogits out = model.decode_mask_graph(features, dense, prompt);

                const Tensor gt = mask_target(s.mask);
                Var probs = ag::sigmoid(out.logits);
                const double iou = evaluation::mask_iou(out.binarize(), s.mask).iou;
                Var quality = ag::slice_rows(ag::transpose(out.quality), out.selected_head, out.selected_head + 1);
                Var loss = ag::add(ag::add(focal_loss(probs, gt, lc.focal_gamma, lc.focal_alpha),
                                           dice_loss(probs, gt, lc.dice_smooth)),
                                   mse_loss(quality, Tensor(quality.shape(), iou)));
                if (!std::isfinite(loss.value()[0]))
                    throw NumericalError("non-finite generalist pretraining loss at step " + std::to_string(step));
                ag::backward(ag::scale(loss, inv));
                rec.loss += loss.value()[0] * inv;
                rec.iou += iou * inv;
            }
            adam.step(cosine_lr(cfg.lr, 0.0, step, cfg.steps));
            model.params().zero_grad();
            log.push_back(rec);
            if (progress) progress(rec);
        }
    } catch (...) {
        model.params().set_trainable(false);
        throw;
    }
    model.params().set_trainable(false);
    model.params().zero_grad();
    return log;
}

std::shared_ptr<generalist::TinyPromptable> pretrained_generalist(const generalist::GeneralistConfig& gcfg,
                                                                  const PretrainConfig& pcfg,
                                                                  const std::filesystem::path& cache)
{
    const nlohmann::json want = {{"generalist", generalist::to_json(gcfg)}, {"pretrain", to_json(pcfg)}};
    if (!cache.empty() && std::filesystem::exists(cache)) {
        try {
            const ckpt::Checkpoint ck = ckpt::load(cache);
            if (ck.meta.value("pretrained_with", nlohmann::json()) == want) {
                auto m = std::make_shared<generalist::TinyPromptable>(gcfg);
                ckpt::load_store(ck, "", m->params());
                return m;
            }
        } catch (const ArtifactMismatch&) {
            // stale or foreign file: retrain and overwrite
        }
    }
    auto m = std::make_shared<generalist::TinyPromptable>(gcfg);
    pretrain_generalist(*m, pcfg);
    if (!cache.empty()) {
        ckpt::Checkpoint ck;
        auto j = generalist::to_json(gcfg);
        j["preset"] = "default";
        ck.meta["generalist"] = j;
        ck.meta["pretrained_with"] = want;
        ckpt::add_store(ck, "", m->params());
        ckpt::save(cache, ck);
    }
    return m;
}

} // namespace uvs::training
