#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "ptnet/checkpoint.hpp"
#include "ptnet/config.hpp"
#include "ptnet/container.hpp"
#include "ptnet/errors.hpp"
#include "ptnet/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ptnet;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

RunConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  if (!fs::exists(path)) throw std::runtime_error("config file not found: " + path);
  return RunConfig::load(path);
}

std::vector<const Sample*> split_or_fail(const Dataset& ds, const std::string& split) {
  if (split != "train" && split != "val" && split != "test") throw UsageError("unknown split '" + split + "'");
  auto s = ds.split(split);
  if (s.empty()) throw UsageError("split '" + split + "' is empty");
  return s;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string out, config, mix;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

int cmd_generate(const GenerateArgs& a) {
  auto cfg = load_config(a.config);
  if (a.n) cfg.data.n_pairs = a.n;
  cfg.data.seed = a.seed;
  if (!a.mix.empty()) cfg.data.mix = parse_mix(a.mix);
  const auto manifest = build_dataset(a.out, cfg.data);
  std::cout << "wrote " << cfg.data.n_pairs << " pairs to " << a.out << " (train " << manifest["splits"]["train"]
            << ", val " << manifest["splits"]["val"] << ", test " << manifest["splits"]["test"] << ")\n"
            << "content_hash " << manifest["content_hash"].get<std::string>() << "\n";
  return kOk;
}

struct InitArgs {
  std::string data, out, config;
  std::optional<std::size_t> k;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau, sigma;
  bool force = false;
};

int cmd_init_prototypes(const InitArgs& a) {
  auto cfg = load_config(a.config);
  if (a.k) cfg.bank.k = *a.k;
  if (a.seed) cfg.model.seed = *a.seed;
  if (a.tau) cfg.bank.temperature = *a.tau;
  if (a.sigma) cfg.bank.sigma = *a.sigma;
  cfg.bank.seed = cfg.model.seed;
  if (fs::exists(a.out) && !a.force) throw UsageError(a.out + " already exists; pass --force to overwrite");
  const auto ds = load_dataset(a.data);
  const auto train = ds.split("train");
  if (cfg.bank.k == 0 || cfg.bank.k > train.size()) {
    throw UsageError("k=" + std::to_string(cfg.bank.k) + " exceeds the " + std::to_string(train.size()) +
                     " training samples");
  }
  const auto bank = build_prototype_bank(train, cfg.model.backbone, cfg.model.seed, cfg.bank, ds.content_hash());
  save_bank(a.out, bank, cfg.model.backbone, cfg.model.seed);
  std::cout << "prototype bank " << shape_str(bank.prototypes.shape()) << " from " << train.size()
            << " training samples, " << bank.clusters.iterations << " Lloyd iterations\n"
            << "dataset_hash " << bank.provenance.dataset_hash << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config, data, bank, out, resume;
  bool no_proto = false, no_tamg = false, no_detguided = false, no_align = false;
  std::optional<std::size_t> epochs;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = load_config(a.config);
  auto& flags = cfg.model.flags;
  if (a.no_proto) flags.proto = false;
  if (a.no_tamg) flags.tamg = false;
  if (a.no_detguided) flags.det_guided = false;
  if (a.no_align) flags.align = false;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  cfg.train.threads = threads_from_env(cfg.train.threads);

  const auto ds = load_dataset(a.data);
  const auto train = split_or_fail(ds, "train");

  std::vector<EpochReport> log;
  std::optional<Checkpoint> ck;
  if (!a.resume.empty()) {
    ck = load_checkpoint(a.resume);
    if (!(ck->model.flags() == flags)) throw UsageError("ablation flags differ from the resumed checkpoint");
    for (const auto& r : ck->extra.value("log", json::array())) log.push_back(EpochReport::from_json(r));
    if (!a.bank.empty()) std::cerr << "warning: --bank is ignored when resuming\n";
  }
  std::optional<PrototypeBank> bank;
  if (!ck) {
    if (flags.proto) {
      if (a.bank.empty()) throw UsageError("prototype modulation needs --bank (or pass --no-proto)");
      auto file = load_bank(a.bank);
      if (file.backbone.dim != cfg.model.backbone.dim || file.backbone.grid() != cfg.model.backbone.grid()) {
        throw UsageError("prototype bank geometry does not match the model configuration");
      }
      if (file.model_seed != cfg.model.seed) {
        std::cerr << "warning: bank was built with model seed " << file.model_seed << ", training uses "
                  << cfg.model.seed << "\n";
      }
      if (file.bank.provenance.dataset_hash != ds.content_hash()) {
        std::cerr << "warning: bank was built from a different dataset\n";
      }
      bank = std::move(file.bank);
    } else if (!a.bank.empty()) {
      std::cerr << "warning: --no-proto given, ignoring --bank\n";
    }
  }

  PtNet model = ck ? std::move(ck->model) : PtNet::create(cfg.model, default_vocabulary(), bank);
  TrainState state = ck ? std::move(ck->state) : TrainState{};
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.ini", cfg.to_ini());
  json run{{"config", cfg.to_json()},
           {"dataset_hash", ds.content_hash()},
           {"seeds", {{"data", ds.manifest.at("seed")}, {"model", cfg.model.seed}, {"train", cfg.train.seed}}},
           {"parameters", model.params().scalar_count()},
           {"resumed_from", a.resume.empty() ? json(nullptr) : json(a.resume)}};
  write_text(fs::path(a.out) / "run.json", run.dump(2) + "\n");

  if (!a.quiet) {
    std::cout << "training " << model.params().scalar_count() << " parameters on " << train.size()
              << " pairs, epochs " << state.epoch + 1 << ".." << cfg.train.epochs << "\n";
  }
  std::ofstream log_out(fs::path(a.out) / "log.jsonl", std::ios::trunc);
  if (!log_out) throw std::runtime_error("cannot write training log");
  for (const auto& r : log) log_out << r.to_json().dump() << "\n";
  while (state.epoch < cfg.train.epochs) {
    const auto rep = train_epoch(model, train, cfg.train, state);
    log.push_back(rep);
    log_out << rep.to_json().dump() << "\n" << std::flush;
    if (!a.quiet) {
      std::cout << "epoch " << rep.epoch << "  L_c " << rep.lc << "  L_d " << rep.ld << "  L_a " << rep.la
                << "  lambda " << rep.lambda1 << "/" << rep.lambda2 << "\n"
                << std::flush;
    }
    json log_json = json::array();
    for (const auto& r : log) log_json.push_back(r.to_json());
    save_checkpoint(fs::path(a.out) / "checkpoint", model, cfg.train, state,
                    {{"log", log_json}, {"dataset_hash", ds.content_hash()}});
  }
  write_curves_csv(fs::path(a.out) / "curves.csv", log);
  write_curves_svg(fs::path(a.out) / "curves.svg", log);
  return kOk;
}

struct EvalArgs {
  std::string ckpt, predictions, data, split = "test", out, csv, save_predictions;
};

std::vector<Prediction> read_predictions(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read predictions " + file.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      Prediction p;
      p.id = j.at("id").get<std::string>();
      p.caption = j.at("caption").get<std::string>();
      fs::path mask = j.at("mask").get<std::string>();
      if (mask.is_relative()) mask = file.parent_path() / mask;
      p.mask = read_mask_pgm(mask);
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw FormatError("predictions line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_predictions(const fs::path& dir, const std::vector<Prediction>& preds, std::size_t size) {
  fs::create_directories(dir / "masks");
  std::ofstream out(dir / "predictions.jsonl", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write predictions");
  for (const auto& p : preds) {
    const auto rel = "masks/" + p.id + ".pgm";
    write_mask_pgm(dir / rel, p.mask, size, size);
    out << json{{"id", p.id}, {"caption", p.caption}, {"mask", rel}}.dump() << "\n";
  }
}

int cmd_eval(const EvalArgs& a) {
  if (a.ckpt.empty() == a.predictions.empty()) throw UsageError("give exactly one of --ckpt or --predictions");
  const auto ds = load_dataset(a.data);
  const auto split = split_or_fail(ds, a.split);
  MetricReport report;
  json echo;
  if (!a.ckpt.empty()) {
    if (!fs::exists(a.ckpt)) throw std::runtime_error("checkpoint not found: " + a.ckpt);
    const auto ck = load_checkpoint(a.ckpt);
    const auto preds = predict_all(ck.model, split, threads_from_env(1));
    report = score_predictions(preds, split);
    if (!a.save_predictions.empty()) write_predictions(a.save_predictions, preds, ck.model.config().backbone.image_size);
    echo = {{"checkpoint", a.ckpt},
            {"model", ck.model.config().to_json()},
            {"train", ck.train.to_json()},
            {"epoch", ck.state.epoch}};
  } else {
    auto preds = read_predictions(a.predictions);
    std::map<std::string, Prediction> by_id;
    for (auto& p : preds) by_id[p.id] = std::move(p);
    std::vector<Prediction> ordered;
    for (const auto* s : split) {
      auto it = by_id.find(s->id);
      if (it == by_id.end()) throw FormatError("no prediction for pair " + s->id);
      ordered.push_back(it->second);
    }
    report = score_predictions(ordered, split);
    echo = {{"predictions", a.predictions}};
  }
  report.metadata["source"] = echo;
  report.metadata["split"] = a.split;
  report.metadata["dataset_hash"] = ds.content_hash();
  const auto text = report.to_json().dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
  }
  if (!a.csv.empty()) write_metrics_csv(a.csv, report);
  std::cerr << "BLEU-4 " << *report.bleu4 << "  CIDEr-D " << *report.cider_d << "  F1 " << *report.f1 << "  IoU "
            << *report.iou << "  word accuracy " << *report.word_accuracy << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint change captioning and change detection on synthetic bi-temporal scenes"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--n", gen.n, "Number of pairs (at least 10)");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--mix", gen.mix, "Weights none,add_block,remove_block,recolor_region");
  g->add_option("--config", gen.config, "Run configuration (INI)");

  InitArgs init;
  auto* ip = app.add_subcommand("init-prototypes", "Build the prototype bank from the training split");
  ip->add_option("--data", init.data, "Dataset directory")->required();
  ip->add_option("--out", init.out, "Output bank directory")->required();
  ip->add_option("--k", init.k, "Number of prototypes");
  ip->add_option("--seed", init.seed, "Model seed (selects the initial encoder and K-means stream)");
  ip->add_option("--tau-proto", init.tau, "Soft-assignment temperature");
  ip->add_option("--sigma", init.sigma, "RBF bandwidth in token-grid units");
  ip->add_option("--config", init.config, "Run configuration (INI)");
  ip->add_flag("--force", init.force, "Overwrite an existing bank");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the network");
  t->add_option("--config", tr.config, "Run configuration (INI)");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--bank", tr.bank, "Prototype bank directory");
  t->add_option("--out", tr.out, "Run output directory")->required();
  t->add_option("--resume", tr.resume, "Checkpoint directory to continue from");
  t->add_option("--epochs", tr.epochs, "Total epochs (overrides the config)");
  t->add_flag("--no-proto", tr.no_proto, "Disable prototype modulation");
  t->add_flag("--no-tamg", tr.no_tamg, "Replace gating with a uniform level mean");
  t->add_flag("--no-detguided", tr.no_detguided, "Drop detection tokens from the caption input");
  t->add_flag("--no-align", tr.no_align, "Drop the alignment loss");
  t->add_flag("--quiet", tr.quiet, "Only write files");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint or a predictions file");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint directory");
  e->add_option("--predictions", ev.predictions, "Predictions JSON-lines (id, caption, mask)");
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--split", ev.split, "train, val or test");
  e->add_option("--out", ev.out, "Report JSON path (stdout when omitted)");
  e->add_option("--csv", ev.csv, "Per-sample metrics CSV");
  e->add_option("--save-predictions", ev.save_predictions, "Directory for decoded captions and masks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*ip) return cmd_init_prototypes(init);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& err) {  // ConfigError, ShapeError
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
