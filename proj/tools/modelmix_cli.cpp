#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modelmix/augment.hpp"
#include "modelmix/checkpoint.hpp"
#include "modelmix/io_util.hpp"
#include "modelmix/metrics.hpp"
#include "modelmix/synthtasks.hpp"
#include "modelmix/trainer.hpp"
#include "modelmix/verify.hpp"

namespace fs = std::filesystem;
using namespace modelmix;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

// Missing inputs and bad arguments are reported with usage, like parse errors.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failures while writing results are runtime errors, not bad input.
class WriteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename F>
void writing(F&& f) {
  try {
    f();
  } catch (const IoError& e) {
    throw WriteError(e.what());
  }
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename Int>
std::vector<Int> parse_int_list(const std::string& text, const char* what) {
  std::vector<Int> out;
  for (const auto& s : split_list(text)) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size() || v < 0) throw std::invalid_argument(s);
      out.push_back(static_cast<Int>(v));
    } catch (const std::exception&) {
      throw UsageError(std::string("bad ") + what + " entry '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError(std::string(what) + " list is empty");
  return out;
}

struct GenDataArgs {
  std::uint64_t seed = 7;
  fs::path out;
  SynthConfig cfg;
};

int gen_data(const GenDataArgs& a) {
  auto [structure, pathology] = generate_task_pair(a.seed, a.cfg);
  for (const TaskDataset* ds : {&structure, &pathology}) {
    writing([&] { write_dataset(*ds, a.out / ds->name); });
    std::printf("wrote %s (%zu items, %zu labeled)\n", (a.out / ds->name).string().c_str(), ds->items.size(),
                ds->labeled_ids().size());
  }
  return kOk;
}

struct TrainArgs {
  fs::path config;
  int variant = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t epochs = 0;
  fs::path out = "runs/train";
};

void print_epoch(const EpochRecord& e, const TrainHistory& h) {
  std::printf("epoch %4zu  val dice %s %.4f  %s %.4f\n", e.epoch, h.tasks[0].c_str(), e.val_mean_dice[0],
              h.tasks[1].c_str(), e.val_mean_dice[1]);
  std::fflush(stdout);
}

int train_cmd(const TrainArgs& a) {
  require_file(a.config, "config");
  TrainConfig cfg = load_config(a.config);
  if (a.variant != 0) cfg.variant = a.variant;
  if (a.seed_set) cfg.seed = a.seed;
  if (a.epochs != 0) cfg.epochs = a.epochs;
  cfg.validate();
  for (const auto& [i, j] : cfg.task_pairs) {
    require_dir(i, "dataset");
    require_dir(j, "dataset");
  }
  const TrainResult r = train(cfg, a.out, print_epoch);
  for (const auto& w : r.history.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  for (std::size_t t = 0; t < 2; ++t) {
    std::printf("best val dice %s %.4f at epoch %zu -> %s\n", r.history.tasks[t].c_str(), r.history.best_val_dice[t],
                r.history.best_epoch[t], r.checkpoints[t].string().c_str());
  }
  return kOk;
}

struct EvalArgs {
  fs::path checkpoint, dataset, out;
  std::string split = "test";
  std::uint64_t seed = 0;
};

int eval_cmd(const EvalArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.dataset, "dataset");
  const SegModel<float> model = load_checkpoint(a.checkpoint);
  const TaskDataset ds = read_dataset(a.dataset);
  const MetricReport rep = evaluate(model, ds, parse_split(a.split));
  writing([&] { write_report(rep, a.out); });
  std::printf("%s/%s: %zu items, mean dice %.4f, mean hd %.3f -> %s\n", ds.name.c_str(), a.split.c_str(),
              rep.items.size(), rep.mean_dice, rep.mean_hd, a.out.string().c_str());
  return kOk;
}

struct AblateArgs {
  fs::path config, out = "runs/ablation";
  std::string variants = "1,2,3,4,5";
  std::string seeds = "0,1,2";
  std::size_t epochs = 0;
};

int ablate_cmd(const AblateArgs& a) {
  require_file(a.config, "config");
  TrainConfig cfg = load_config(a.config);
  if (a.epochs != 0) cfg.epochs = a.epochs;
  cfg.validate();
  if (cfg.task_pairs.size() != 1) throw ContractViolation("ablate: the config must name exactly one task pair");
  require_dir(cfg.task_pairs[0].first, "dataset");
  require_dir(cfg.task_pairs[0].second, "dataset");
  const auto variants = parse_int_list<int>(a.variants, "variant");
  const auto seeds = parse_int_list<std::uint64_t>(a.seeds, "seed");
  const TaskDataset di = read_dataset(cfg.task_pairs[0].first);
  const TaskDataset dj = read_dataset(cfg.task_pairs[0].second);
  const AblationTable table = run_ablation(cfg, di, dj, variants, seeds, a.out, [](const AblationRun& r) {
    std::printf("variant %d seed %llu  test dice %.4f  (%.0f s)\n", r.variant, static_cast<unsigned long long>(r.seed),
                r.mean_dice, r.wall_clock_seconds);
    std::fflush(stdout);
  });
  for (int v : table.variants()) std::printf("variant %d mean dice %.4f\n", v, table.variant_mean_dice(v));
  std::printf("wrote %s\n", (a.out / "ablation.csv").string().c_str());
  return kOk;
}

int verify_cmd(const std::string& suite, std::uint64_t seed) {
  const auto results = run_suites(suite, seed);
  bool ok = true;
  for (const auto& r : results) {
    for (const auto& c : r.checks) {
      std::printf("  %s %-40s %s\n", c.passed ? "ok  " : "FAIL", c.name.c_str(), c.detail.c_str());
    }
    std::printf("[%s] %s %.2fs\n", r.suite.c_str(), r.passed() ? "PASS" : "FAIL", r.seconds);
    ok = ok && r.passed();
  }
  return ok ? kOk : kRuntime;
}

struct RenderArgs {
  fs::path checkpoint, dataset, out = "renders";
  std::string ids;
  std::string split = "test";
  std::uint64_t seed = 0;
};

Grid<std::uint8_t> label_to_gray(const LabelMap& l, int num_classes) {
  Grid<std::uint8_t> g(l.h, l.w);
  for (std::size_t p = 0; p < l.data.size(); ++p) {
    g.data[p] = static_cast<std::uint8_t>(l.data[p] * 255 / (num_classes - 1));
  }
  return g;
}

// Input, prediction and ground truth side by side with a 2 pixel white gap.
Grid<std::uint8_t> triptych(const Image& image, const LabelMap& pred, const LabelMap& gt, int num_classes) {
  constexpr std::size_t gap = 2;
  const std::size_t h = image.h, w = image.w;
  Grid<std::uint8_t> out(h, 3 * w + 2 * gap, 255);
  const Grid<std::uint8_t> panels[2] = {label_to_gray(pred, num_classes), label_to_gray(gt, num_classes)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const float v = std::clamp(image.at(y, x), 0.0f, 1.0f);
      out.at(y, x) = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      out.at(y, w + gap + x) = panels[0].at(y, x);
      out.at(y, 2 * (w + gap) + x) = panels[1].at(y, x);
    }
  }
  return out;
}

int render_cmd(const RenderArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.dataset, "dataset");
  const SegModel<float> model = load_checkpoint(a.checkpoint);
  const TaskDataset ds = read_dataset(a.dataset);
  if (model.config().num_classes != ds.num_classes) {
    throw ContractViolation("render: checkpoint has " + std::to_string(model.config().num_classes) +
                            " classes, dataset '" + ds.name + "' has " + std::to_string(ds.num_classes));
  }
  std::vector<const DatasetItem*> items;
  if (a.ids.empty()) {
    items = ds.split(parse_split(a.split));
  } else {
    for (const auto& id : split_list(a.ids)) {
      auto it = std::find_if(ds.items.begin(), ds.items.end(), [&](const DatasetItem& d) { return d.id == id; });
      if (it == ds.items.end()) throw UsageError("render: no item '" + id + "' in " + a.dataset.string());
      items.push_back(&*it);
    }
  }
  for (const DatasetItem* it : items) {
    const Image input = normalize_intensity(it->image);
    const Tensor4<float> probs = model.predict(stack_images<float>({&input}));
    const LabelMap pred = argmax_labels(probs, 0);
    const fs::path path = a.out / (ds.name + "_" + it->id + ".pgm");
    writing([&] { write_pgm(path, triptych(it->image, pred, it->label, ds.num_classes)); });
    std::printf("wrote %s\n", path.string().c_str());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modelmix: few-scribble segmentation with convolution-mixed virtual models"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Write the structure and pathology synthetic datasets");
  gen->add_option("--seed", gd.seed, "Generator seed")->capture_default_str();
  gen->add_option("--out", gd.out, "Output directory (gets structure/ and pathology/)")->required();
  gen->add_option("--labeled", gd.cfg.labeled, "Scribble-labeled training images per task")->capture_default_str();
  gen->add_option("--unlabeled", gd.cfg.unlabeled, "Unlabeled training images")->capture_default_str();
  gen->add_option("--val", gd.cfg.val, "Validation images")->capture_default_str();
  gen->add_option("--test", gd.cfg.test, "Test images")->capture_default_str();
  gen->add_option("--size", gd.cfg.size, "Image side in pixels")->capture_default_str();
  gen->add_option("--noise", gd.cfg.noise_sigma, "Additive Gaussian noise sigma")->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train one variant on the config's task pair");
  tr->add_option("--config", ta.config, "Training config JSON")->required();
  tr->add_option("--variant", ta.variant, "Override the config variant (1-5)");
  auto* tr_seed = tr->add_option("--seed", ta.seed, "Override the config seed");
  tr->add_option("--epochs", ta.epochs, "Override the config epoch count");
  tr->add_option("--out", ta.out, "Run directory")->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ea.checkpoint, "Model checkpoint (.mmck)")->required();
  ev->add_option("--dataset", ea.dataset, "Dataset directory")->required();
  ev->add_option("--split", ea.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  ev->add_option("--out", ea.out, "Per-item CSV (a .json summary is written next to it)")->required();
  ev->add_option("--seed", ea.seed, "Unused; evaluation is deterministic");

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "Run the variant x seed ablation matrix");
  ab->add_option("--config", aa.config, "Base training config JSON")->required();
  ab->add_option("--variants", aa.variants, "Comma-separated variants")->capture_default_str();
  ab->add_option("--seeds", aa.seeds, "Comma-separated training seeds")->capture_default_str();
  ab->add_option("--epochs", aa.epochs, "Override the config epoch count");
  ab->add_option("--out", aa.out, "Output directory")->capture_default_str();

  std::string suite = "all";
  std::uint64_t verify_seed = 0;
  auto* ve = app.add_subcommand("verify", "Run the property suites; exit 0 iff all pass");
  ve->add_option("--suite", suite, "linearity, gradients, losses, metrics or all")
      ->check(CLI::IsMember({"linearity", "gradients", "losses", "metrics", "all"}))
      ->capture_default_str();
  ve->add_option("--seed", verify_seed, "Offset added to each suite's seed")->capture_default_str();

  RenderArgs ra;
  auto* re = app.add_subcommand("render", "Write input / prediction / ground-truth PGM triptychs");
  re->add_option("--checkpoint", ra.checkpoint, "Model checkpoint (.mmck)")->required();
  re->add_option("--dataset", ra.dataset, "Dataset directory")->required();
  re->add_option("--ids", ra.ids, "Comma-separated item ids (default: every item of --split)");
  re->add_option("--split", ra.split, "Split used when --ids is absent")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  re->add_option("--out", ra.out, "Output directory")->capture_default_str();
  re->add_option("--seed", ra.seed, "Unused; rendering is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == gen) return gen_data(gd);
    if (active == tr) {
      ta.seed_set = tr_seed->count() > 0;
      return train_cmd(ta);
    }
    if (active == ev) return eval_cmd(ea);
    if (active == ab) return ablate_cmd(aa);
    if (active == ve) return verify_cmd(suite, verify_seed);
    if (active == re) return render_cmd(ra);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active->help();
    return kUsage;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
