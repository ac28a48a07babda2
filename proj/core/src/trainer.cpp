#include "modelmix/trainer.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "modelmix/checkpoint.hpp"
#include "modelmix/io_util.hpp"
#include "modelmix/ops.hpp"

namespace modelmix {

using nlohmann::json;

Adam::Adam(const std::vector<Var<float>>& params, double lr, AdamOptions opts) : lr_(lr), opts_(opts) {
  std::set<const Node<float>*> seen;
  for (const auto& p : params) {
    if (seen.insert(p.node()).second) {
      params_.push_back(p);
      m_.emplace_back(p.value().numel(), 0.0);
      v_.emplace_back(p.value().numel(), 0.0);
    }
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var<float>& p = params_[k];
    const bool has = p.has_grad();
    const float* g = has ? p.node()->grad.data().data() : nullptr;
    float* w = p.mutable_value().data().data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double gi = has ? static_cast<double>(g[i]) : 0.0;
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
      const double update = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.eps);
      w[i] = static_cast<float>(static_cast<double>(w[i]) - update);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void TrainConfig::validate() const {
  if (task_pairs.size() > 1) {
    throw ContractViolation("TrainConfig: only one task pair is supported, got " + std::to_string(task_pairs.size()));
  }
  unet.validate();
  beta_lambda.validate();
  beta_alpha.validate();
  cutout.validate();
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractViolation("TrainConfig: lr must be positive");
  if (batch_size < 1) throw ContractViolation("TrainConfig: batch_size must be >= 1");
  if (epochs < 1) throw ContractViolation("TrainConfig: epochs must be >= 1");
  if (eval_every < 1) throw ContractViolation("TrainConfig: eval_every must be >= 1");
  if (labeled_per_batch > batch_size) throw ContractViolation("TrainConfig: labeled_per_batch exceeds batch_size");
  variant_spec(variant);
  if (mixed_layers < 1 || mixed_layers > static_cast<std::size_t>(2 * unet.depth)) {
    throw ContractViolation("TrainConfig: mixed_layers must lie in [1, " + std::to_string(2 * unet.depth) + "]");
  }
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0) ||
      !(optimizer.eps > 0.0)) {
    throw ContractViolation("TrainConfig: optimizer betas must lie in [0, 1) and eps must be positive");
  }
}

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
  if (!obj.is_object()) throw ContractViolation("config: '" + where + "' must be an object");
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* key : keys) ok = ok || k == key;
    if (!ok) throw ContractViolation("config: unknown key '" + k + "' in " + where);
  }
}

template <typename V>
void read_opt(const json& obj, const char* key, V& out) {
  if (auto it = obj.find(key); it != obj.end()) out = it->get<V>();
}

BetaParams beta_from(const json& j, const std::string& where) {
  reject_unknown(j, {"a", "b"}, where);
  BetaParams b;
  read_opt(j, "a", b.a);
  read_opt(j, "b", b.b);
  return b;
}

}  // namespace

TrainConfig config_from_json(const std::string& text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ContractViolation(std::string("config: invalid JSON: ") + e.what());
  }
  TrainConfig c;
  try {
    reject_unknown(j,
                   {"task_pairs", "unet", "beta_lambda", "beta_alpha", "lr", "batch_size", "epochs", "seed", "variant",
                    "stop_gradient_targets", "cutout", "optimizer", "loss_weights", "mixed_layers", "augment",
                    "labeled_per_batch", "eval_every"},
                   "top level");
    if (auto it = j.find("task_pairs"); it != j.end()) {
      for (const auto& pair : *it) {
        if (!pair.is_array() || pair.size() != 2) {
          throw ContractViolation("config: each task pair must be [dir_i, dir_j]");
        }
        auto resolve = [&](const json& p) {
          std::filesystem::path path = p.get<std::string>();
          return (path.is_relative() && !base_dir.empty() ? base_dir / path : path).string();
        };
        c.task_pairs.emplace_back(resolve(pair[0]), resolve(pair[1]));
      }
    }
    if (auto it = j.find("unet"); it != j.end()) {
      reject_unknown(*it, {"depth", "base_channels", "in_channels", "dropout_rate"}, "unet");
      read_opt(*it, "depth", c.unet.depth);
      read_opt(*it, "base_channels", c.unet.base_channels);
      read_opt(*it, "in_channels", c.unet.in_channels);
      read_opt(*it, "dropout_rate", c.unet.dropout_rate);
    }
    if (auto it = j.find("beta_lambda"); it != j.end()) c.beta_lambda = beta_from(*it, "beta_lambda");
    if (auto it = j.find("beta_alpha"); it != j.end()) c.beta_alpha = beta_from(*it, "beta_alpha");
    read_opt(j, "lr", c.lr);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "seed", c.seed);
    read_opt(j, "variant", c.variant);
    read_opt(j, "stop_gradient_targets", c.stop_gradient_targets);
    read_opt(j, "mixed_layers", c.mixed_layers);
    read_opt(j, "augment", c.augment);
    read_opt(j, "labeled_per_batch", c.labeled_per_batch);
    read_opt(j, "eval_every", c.eval_every);
    if (auto it = j.find("cutout"); it != j.end()) {
      reject_unknown(*it, {"side_fraction"}, "cutout");
      read_opt(*it, "side_fraction", c.cutout.side_fraction);
    }
    if (auto it = j.find("optimizer"); it != j.end()) {
      reject_unknown(*it, {"beta1", "beta2", "eps"}, "optimizer");
      read_opt(*it, "beta1", c.optimizer.beta1);
      read_opt(*it, "beta2", c.optimizer.beta2);
      read_opt(*it, "eps", c.optimizer.eps);
    }
    if (auto it = j.find("loss_weights"); it != j.end()) {
      reject_unknown(*it, {"pce", "inv", "vicinal_sup", "vicinal_reg"}, "loss_weights");
      read_opt(*it, "pce", c.loss_weights.pce);
      read_opt(*it, "inv", c.loss_weights.inv);
      read_opt(*it, "vicinal_sup", c.loss_weights.vicinal_sup);
      read_opt(*it, "vicinal_reg", c.loss_weights.vicinal_reg);
    }
  } catch (const json::exception& e) {
    throw ContractViolation(std::string("config: wrong value type: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_to_json(const TrainConfig& c) {
  json pairs = json::array();
  for (const auto& [a, b] : c.task_pairs) pairs.push_back({a, b});
  json j = {
      {"task_pairs", pairs},
      {"unet",
       {{"depth", c.unet.depth},
        {"base_channels", c.unet.base_channels},
        {"in_channels", c.unet.in_channels},
        {"dropout_rate", c.unet.dropout_rate}}},
      {"beta_lambda", {{"a", c.beta_lambda.a}, {"b", c.beta_lambda.b}}},
      {"beta_alpha", {{"a", c.beta_alpha.a}, {"b", c.beta_alpha.b}}},
      {"lr", c.lr},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"variant", c.variant},
      {"stop_gradient_targets", c.stop_gradient_targets},
      {"cutout", {{"side_fraction", c.cutout.side_fraction}}},
      {"optimizer", {{"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}}},
      {"loss_weights",
       {{"pce", c.loss_weights.pce},
        {"inv", c.loss_weights.inv},
        {"vicinal_sup", c.loss_weights.vicinal_sup},
        {"vicinal_reg", c.loss_weights.vicinal_reg}}},
      {"mixed_layers", c.mixed_layers},
      {"augment", c.augment},
      {"labeled_per_batch", c.labeled_per_batch},
      {"eval_every", c.eval_every},
  };
  return j.dump(2) + "\n";
}

TrainConfig load_config(const std::filesystem::path& path) {
  return config_from_json(read_text_file(path), path.parent_path());
}

ModelMixTrainer::ModelMixTrainer(const TrainConfig& cfg, const TaskDataset& task_i, const TaskDataset& task_j)
    : cfg_(cfg), spec_(variant_spec(cfg.variant)) {
  cfg_.validate();
  if (task_i.height != task_j.height || task_i.width != task_j.width) {
    throw ContractViolation("trainer: task image sizes differ");
  }
  SeededRng init(cfg_.seed);
  init = init.fork(1);
  for (const TaskDataset* ds : {&task_i, &task_j}) {
    UNetConfig u = cfg_.unet;
    u.num_classes = ds->num_classes;
    u.validate_input(Shape4{1, 1, ds->height, ds->width});
    models_.push_back(build_model<float>(u, ds->name, init));
  }
  if (spec_.shared_encoder) models_[1].share_encoder_with(models_[0]);
  std::vector<Var<float>> params = models_[0].parameters();
  for (const auto& p : models_[1].parameters()) params.push_back(p);
  adam_.emplace(params, cfg_.lr, cfg_.optimizer);
}

namespace {

struct PreparedBatch {
  Var<float> x1c;      // cutout images
  Var<float> x_mixed;  // alpha * x1c + (1 - alpha) * roll(x1c)
  std::vector<ScribbleMap> scribbles;
  double alpha = 1.0;
};

PreparedBatch prepare(const Batch& batch, const TrainConfig& cfg, SeededRng& rng) {
  if (batch.empty()) throw ContractViolation("train_step: empty batch");
  PreparedBatch out;
  std::vector<Image> images;
  for (const DatasetItem* it : batch) {
    SeededRng item_rng = rng.fork(0);
    Image img = normalize_intensity(it->image);
    ScribbleMap sc = it->scribble;
    if (cfg.augment) {
      GeomTriple g = geom_augment(img, LabelMap(), sc, item_rng);
      img = std::move(g.image);
      sc = std::move(g.scribble);
    }
    images.push_back(cutout(img, cfg.cutout, item_rng).image);
    out.scribbles.push_back(std::move(sc));
  }
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  out.x1c = Var<float>::leaf(stack_images<float>(ptrs));
  SeededRng alpha_rng = rng.fork(1);
  out.alpha = sample_lambda(cfg.beta_alpha, alpha_rng);
  out.x_mixed = detach(axpby(out.alpha, out.x1c, 1.0 - out.alpha, batch_roll(out.x1c, 1)));
  return out;
}

double value_of(const Var<float>& v) { return static_cast<double>(v.item()); }

}  // namespace

StepResult ModelMixTrainer::train_step(const Batch& batch_i, const Batch& batch_j, SeededRng& rng) {
  StepResult result;
  const std::array<const Batch*, 2> batches{&batch_i, &batch_j};
  const LossWeights& w = cfg_.loss_weights;
  const bool mixing = spec_.vicinal_sup || spec_.vicinal_reg;

  LossParts parts;
  std::vector<Var<float>> terms;
  std::vector<double> weights;
  auto add_term = [&](const Var<float>& v, double weight) {
    terms.push_back(v);
    weights.push_back(weight);
  };

  for (std::size_t t = 0; t < 2; ++t) {
    const std::size_t o = 1 - t;
    SeededRng task_rng = rng.fork(t);
    PreparedBatch pb = prepare(*batches[t], cfg_, task_rng);
    result.alpha[t] = pb.alpha;
    const SegModel<float>& model = models_[t];

    // The virtual model reuses the individual pass's dropout masks.
    SeededRng dropout_rng = task_rng.fork(2);
    SeededRng virtual_dropout_rng = dropout_rng;
    Var<float> out1 = model.forward(pb.x1c, true, dropout_rng);

    if (spec_.pce) {
      SupervisedLoss<float> pce = partial_ce(out1, pb.scribbles);
      result.annotated[t] = pce.annotated;
      parts.pce += value_of(pce.value);
      add_term(pce.value, w.pce);
    }
    if (spec_.inv) {
      SeededRng mix_rng = task_rng.fork(3);
      Var<float> out_mixed = model.forward(pb.x_mixed, true, mix_rng);
      Var<float> inv = mix_invariant_from_outputs(out_mixed, out1, batch_roll(out1, 1), pb.alpha,
                                                  cfg_.stop_gradient_targets);
      parts.inv += value_of(inv);
      add_term(inv, w.inv);
    }
    if (mixing) {
      SeededRng plan_rng = task_rng.fork(4);
      MixPlan plan = sample_mix_plan(model.task_id(), models_[o].task_id(), model.enumerate_encoder_layers(),
                                     cfg_.beta_lambda, plan_rng, cfg_.mixed_layers);
      if (forced_lambda) plan.lambda = *forced_lambda;
      VirtualEncoder<float> virt(model, models_[o], plan);
      Var<float> out_v = virt.forward(pb.x1c, true, virtual_dropout_rng);
      if (spec_.vicinal_sup) {
        SupervisedLoss<float> vs = vicinal_sup_loss(out_v, out1, pb.scribbles);
        result.annotated[t] = vs.annotated;
        parts.vicinal_sup += value_of(vs.value);
        add_term(vs.value, w.vicinal_sup);
      }
      if (spec_.vicinal_reg) {
        Var<float> vr = vicinal_reg_loss(out_v, out1, cfg_.stop_gradient_targets);
        parts.vicinal_reg += value_of(vr);
        add_term(vr, w.vicinal_reg);
      }
      result.mix[t] = std::move(plan);
    }
  }

  try {
    result.breakdown = total_loss(mask_parts(parts, spec_), w);
  } catch (const NonFiniteLoss& e) {
    std::ostringstream os;
    os.precision(17);
    os << e.what() << " (pce=" << parts.pce << ", inv=" << parts.inv << ", vicinal_sup=" << parts.vicinal_sup
       << ", vicinal_reg=" << parts.vicinal_reg;
    for (std::size_t t = 0; t < 2; ++t) {
      if (result.mix[t]) {
        os << ", mix" << t << ": lambda=" << result.mix[t]->lambda << " layer=" << result.mix[t]->layers[0].str();
      }
    }
    os << ")";
    throw NonFiniteLoss(os.str());
  }

  // Weighted sum: pairwise axpby keeps it a single differentiable scalar.
  Var<float> total = scale(terms[0], weights[0]);
  for (std::size_t k = 1; k < terms.size(); ++k) total = axpby(1.0, total, weights[k], terms[k]);
  adam_->zero_grad();
  backward(total);
  adam_->step();
  return result;
}

std::string TrainHistory::steps_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,step,pce,inv,vicinal_sup,vicinal_reg,total,lambda_ij,layer_ij,lambda_ji,layer_ji\n";
  for (const auto& s : steps) {
    os << s.epoch << ',' << s.step << ',' << s.loss.pce << ',' << s.loss.inv << ',' << s.loss.vicinal_sup << ','
       << s.loss.vicinal_reg << ',' << s.loss.total << ',' << s.lambda[0] << ',' << s.layer[0] << ',' << s.lambda[1]
       << ',' << s.layer[1] << '\n';
  }
  return os.str();
}

std::string TrainHistory::to_json() const {
  json steps_j = json::array();
  for (const auto& s : steps) {
    steps_j.push_back({{"epoch", s.epoch},
                       {"step", s.step},
                       {"pce", s.loss.pce},
                       {"inv", s.loss.inv},
                       {"vicinal_sup", s.loss.vicinal_sup},
                       {"vicinal_reg", s.loss.vicinal_reg},
                       {"total", s.loss.total}});
  }
  json epochs_j = json::array();
  for (const auto& e : epochs) {
    json tasks_j = json::object();
    for (std::size_t t = 0; t < 2; ++t) {
      tasks_j[this->tasks[t]] = {{"mean_dice", e.val_mean_dice[t]},
                                 {"mean_hd", e.val_mean_hd[t]},
                                 {"class_dice", e.val_class_dice[t]}};
    }
    epochs_j.push_back({{"epoch", e.epoch}, {"val", tasks_j}});
  }
  json j = {{"tasks", tasks},
            {"steps", steps_j},
            {"epochs", epochs_j},
            {"best_val_dice", best_val_dice},
            {"best_epoch", best_epoch},
            {"warnings", warnings},
            {"wall_clock_seconds", wall_clock_seconds}};
  return j.dump(2) + "\n";
}

BatchSampler::BatchSampler(const Batch& pool, std::size_t batch_size, std::size_t labeled_per_batch,
                           std::size_t epoch_items)
    : batch_size_(batch_size), epoch_items_(epoch_items), defines_epoch_(false) {
  if (pool.empty() || batch_size == 0) throw ContractViolation("BatchSampler: empty pool or zero batch size");
  if (epoch_items < pool.size()) throw ContractViolation("BatchSampler: epoch shorter than the pool");
  if (labeled_per_batch == 0) {
    defines_epoch_ = pool.size() == epoch_items;
    streams_.push_back({pool, {}, 0, batch_size});
  } else {
    Stream labeled, unlabeled;
    for (const DatasetItem* it : pool) (it->labeled ? labeled : unlabeled).pool.push_back(it);
    labeled.quota = labeled.pool.empty() ? 0 : std::min(labeled_per_batch, batch_size);
    if (unlabeled.pool.empty()) labeled.quota = batch_size;
    unlabeled.quota = batch_size - labeled.quota;
    for (Stream* st : {&labeled, &unlabeled}) {
      if (st->quota > 0) streams_.push_back(std::move(*st));
    }
  }
  for (Stream& st : streams_) st.cursor = st.pool.size();  // shuffled on first use
}

void BatchSampler::reshuffle(Stream& st, SeededRng& rng) {
  st.order.resize(st.pool.size());
  for (std::size_t k = 0; k < st.order.size(); ++k) st.order[k] = k;
  for (std::size_t k = st.order.size(); k > 1; --k) std::swap(st.order[k - 1], st.order[rng.below(k)]);
  st.cursor = 0;
}

void BatchSampler::begin_epoch(SeededRng& rng) {
  if (defines_epoch_) reshuffle(streams_[0], rng);
}

Batch BatchSampler::next(std::size_t step, SeededRng& rng) {
  Batch batch;
  for (Stream& st : streams_) {
    std::size_t want = st.quota;
    if (defines_epoch_) want = std::min(batch_size_, epoch_items_ - std::min(epoch_items_, step * batch_size_));
    for (std::size_t k = 0; k < want; ++k) {
      if (st.cursor >= st.order.size()) reshuffle(st, rng);
      batch.push_back(st.pool[st.order[st.cursor++]]);
    }
  }
  return batch;
}

TrainResult train(const TrainConfig& cfg, const TaskDataset& task_i, const TaskDataset& task_j,
                  const std::filesystem::path& out_dir, const EpochCallback& on_epoch) {
  const auto started = std::chrono::steady_clock::now();
  ModelMixTrainer trainer(cfg, task_i, task_j);
  const std::array<const TaskDataset*, 2> data{&task_i, &task_j};
  TrainResult result;
  TrainHistory& hist = result.history;
  hist.tasks = {task_i.name, task_j.name};
  if (hist.tasks[0] == hist.tasks[1]) throw ContractViolation("train: both tasks are named '" + hist.tasks[0] + "'");

  std::array<Batch, 2> pools;
  for (std::size_t t = 0; t < 2; ++t) {
    pools[t] = data[t]->split(Split::kTrain);
    if (pools[t].empty()) throw ContractViolation("train: task '" + hist.tasks[t] + "' has no training items");
    if (data[t]->split(Split::kVal).empty()) {
      throw ContractViolation("train: task '" + hist.tasks[t] + "' has no validation items");
    }
    if (data[t]->labeled_ids().empty()) {
      hist.warnings.push_back("task '" + hist.tasks[t] + "' has no labeled items; scribble losses stay 0");
    }
    result.best_models.push_back(trainer.model(t).clone());
  }

  SeededRng master(cfg.seed);
  SeededRng shuffle_rng = master.fork(2);
  SeededRng step_rng = master.fork(3);
  const std::size_t longest = std::max(pools[0].size(), pools[1].size());
  std::vector<BatchSampler> samplers;
  for (std::size_t t = 0; t < 2; ++t) samplers.emplace_back(pools[t], cfg.batch_size, cfg.labeled_per_batch, longest);
  const std::size_t steps_per_epoch = samplers[0].steps_per_epoch();

  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (auto& sampler : samplers) sampler.begin_epoch(shuffle_rng);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::array<Batch, 2> batch;
      for (std::size_t t = 0; t < 2; ++t) batch[t] = samplers[t].next(s, shuffle_rng);
      SeededRng this_step = step_rng.fork(global_step);
      StepResult r;
      try {
        r = trainer.train_step(batch[0], batch[1], this_step);
      } catch (const NonFiniteLoss& e) {
        throw NonFiniteLoss("divergence at step " + std::to_string(global_step) + " (epoch " +
                            std::to_string(epoch) + "): " + e.what());
      }
      StepRecord rec;
      rec.epoch = epoch;
      rec.step = global_step++;
      rec.loss = r.breakdown;
      for (std::size_t t = 0; t < 2; ++t) {
        rec.lambda[t] = r.mix[t] ? r.mix[t]->lambda : std::numeric_limits<double>::quiet_NaN();
        rec.layer[t] = r.mix[t] ? r.mix[t]->layers[0].str() : "";
      }
      hist.steps.push_back(std::move(rec));
    }

    if (epoch % cfg.eval_every != 0 && epoch != cfg.epochs) continue;
    EpochRecord er;
    er.epoch = epoch;
    for (std::size_t t = 0; t < 2; ++t) {
      const MetricReport rep = evaluate(trainer.model(t), *data[t], Split::kVal);
      er.val_mean_dice[t] = rep.mean_dice;
      er.val_mean_hd[t] = rep.mean_hd;
      for (std::size_t c = 1; c < rep.per_class.size(); ++c) er.val_class_dice[t].push_back(rep.per_class[c].dice_mean);
      if (rep.mean_dice > hist.best_val_dice[t]) {
        hist.best_val_dice[t] = rep.mean_dice;
        hist.best_epoch[t] = epoch;
        result.best_models[t] = trainer.model(t).clone();
      }
    }
    hist.epochs.push_back(er);
    if (on_epoch) on_epoch(er, hist);
  }

  hist.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (!out_dir.empty()) {
    for (std::size_t t = 0; t < 2; ++t) {
      const auto path = out_dir / "checkpoints" / (hist.tasks[t] + ".mmck");
      save_checkpoint(path, result.best_models[t]);
      result.checkpoints.push_back(path);
    }
    write_text_file(out_dir / "history.json", hist.to_json());
    write_text_file(out_dir / "steps.csv", hist.steps_csv());
    write_text_file(out_dir / "config.json", config_to_json(cfg));
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, const EpochCallback& on_epoch) {
  if (cfg.task_pairs.size() != 1) throw ContractViolation("train: the config must name exactly one task pair");
  const TaskDataset a = read_dataset(cfg.task_pairs[0].first);
  const TaskDataset b = read_dataset(cfg.task_pairs[0].second);
  return train(cfg, a, b, out_dir, on_epoch);
}

double AblationTable::variant_mean_dice(int variant) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs) {
    if (r.variant == variant) {
      sum += r.mean_dice;
      ++n;
    }
  }
  if (n == 0) throw ContractViolation("AblationTable: no runs for variant " + std::to_string(variant));
  return sum / static_cast<double>(n);
}

std::vector<int> AblationTable::variants() const {
  std::vector<int> out;
  for (const auto& r : runs) {
    if (std::find(out.begin(), out.end(), r.variant) == out.end()) out.push_back(r.variant);
  }
  return out;
}

std::string AblationTable::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "variant";
  for (std::size_t t = 0; t < 2; ++t) {
    for (int c = 1; c < num_classes[t]; ++c) os << ',' << tasks[t] << ".c" << c << "_mean," << tasks[t] << ".c" << c << "_std";
    os << ',' << tasks[t] << ".avg";
  }
  os << ",avg\n";
  for (int v : variants()) {
    os << '#' << v;
    for (std::size_t t = 0; t < 2; ++t) {
      // Pool items across seeds, mirroring mean +- std over test cases.
      MetricReport pooled;
      pooled.num_classes = num_classes[t];
      for (const auto& r : runs) {
        if (r.variant != v) continue;
        pooled.items.insert(pooled.items.end(), r.test[t].items.begin(), r.test[t].items.end());
      }
      aggregate(pooled);
      for (int c = 1; c < num_classes[t]; ++c) {
        os << ',' << pooled.per_class[static_cast<std::size_t>(c)].dice_mean << ','
           << pooled.per_class[static_cast<std::size_t>(c)].dice_std;
      }
      os << ',' << pooled.mean_dice;
    }
    os << ',' << variant_mean_dice(v) << '\n';
  }
  return os.str();
}

std::string AblationTable::runs_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "variant,seed,task,mean_dice,mean_hd\n";
  for (const auto& r : runs) {
    for (std::size_t t = 0; t < 2; ++t) {
      os << r.variant << ',' << r.seed << ',' << tasks[t] << ',' << r.test[t].mean_dice << ',' << r.test[t].mean_hd
         << '\n';
    }
  }
  return os.str();
}

AblationTable run_ablation(const TrainConfig& base, const TaskDataset& task_i, const TaskDataset& task_j,
                           const std::vector<int>& variants, const std::vector<std::uint64_t>& seeds,
                           const std::filesystem::path& out_dir, const RunCallback& on_run,
                           const EpochCallback& on_epoch) {
  if (variants.empty() || seeds.empty()) throw ContractViolation("run_ablation: variants and seeds must be non-empty");
  for (int v : variants) variant_spec(v);
  AblationTable table;
  table.tasks = {task_i.name, task_j.name};
  table.num_classes = {task_i.num_classes, task_j.num_classes};
  for (int v : variants) {
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.variant = v;
      cfg.seed = seed;
      const auto run_dir =
          out_dir.empty() ? std::filesystem::path{} : out_dir / ("v" + std::to_string(v) + "_s" + std::to_string(seed));
      TrainResult tr = train(cfg, task_i, task_j, run_dir, on_epoch);
      AblationRun run;
      run.variant = v;
      run.seed = seed;
      run.test[0] = evaluate(tr.best_models[0], task_i, Split::kTest);
      run.test[1] = evaluate(tr.best_models[1], task_j, Split::kTest);
      run.mean_dice = 0.5 * (run.test[0].mean_dice + run.test[1].mean_dice);
      run.wall_clock_seconds = tr.history.wall_clock_seconds;
      if (!run_dir.empty()) {
        write_report(run.test[0], run_dir / ("test_" + task_i.name + ".csv"));
        write_report(run.test[1], run_dir / ("test_" + task_j.name + ".csv"));
      }
      table.runs.push_back(std::move(run));
      if (on_run) on_run(table.runs.back());
    }
  }
  if (!out_dir.empty()) {
    write_text_file(out_dir / "ablation.csv", table.to_csv());
    write_text_file(out_dir / "ablation_runs.csv", table.runs_csv());
  }
  return table;
}

}  // namespace modelmix
