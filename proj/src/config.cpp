#include "ptnet/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "ptnet/errors.hpp"

namespace ptnet {

namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>> kSchema = {
    {"data", {"n_pairs", "seed", "mix"}},
    {"model",
     {"seed", "image_size", "channels", "patch", "dim", "heads", "mlp_hidden", "mid_channels", "lm_dim", "lm_heads",
      "lm_blocks", "lm_mlp_hidden", "max_caption", "det_grid", "text_dim", "tau_align"}},
    {"prototype", {"k", "tau_proto", "sigma", "max_iters"}},
    {"train",
     {"epochs", "batch_size", "lr", "lr_encoder", "weight_decay", "align_weight", "dwa_temperature", "clip_norm", "seed",
      "threads"}},
    {"ablation", {"proto", "tamg", "det_guided", "align"}},
};

template <typename T>
void read(const pt::ptree& tree, const std::string& key, T& out) {
  const auto node = tree.get_child_optional(pt::ptree::path_type(key, '.'));
  if (!node) return;
  const auto v = node->get_value_optional<T>();
  if (!v) throw ConfigError("config: invalid value '" + node->data() + "' for " + key);
  out = *v;
}

void read_bool(const pt::ptree& tree, const std::string& key, bool& out) {
  const auto node = tree.get_child_optional(pt::ptree::path_type(key, '.'));
  if (!node) return;
  const auto& s = node->data();
  if (s == "true" || s == "1" || s == "on" || s == "yes") out = true;
  else if (s == "false" || s == "0" || s == "off" || s == "no") out = false;
  else throw ConfigError("config: invalid boolean '" + s + "' for " + key);
}

template <typename T>
void positive(const T& v, const char* name) {
  if (!(v > 0)) throw ConfigError(std::string("config: ") + name + " must be positive");
}

std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

RunConfig RunConfig::parse_ini(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    auto it = kSchema.find(section);
    if (it == kSchema.end()) {
      if (body.empty()) throw ConfigError("config: key '" + section + "' outside a section");
      throw ConfigError("config: unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
    }
  }

  RunConfig c;
  read(tree, "data.n_pairs", c.data.n_pairs);
  read(tree, "data.seed", c.data.seed);
  if (auto mix = tree.get_optional<std::string>(pt::ptree::path_type("data.mix", '.'))) c.data.mix = parse_mix(*mix);

  auto& m = c.model;
  read(tree, "model.seed", m.seed);
  read(tree, "model.image_size", m.backbone.image_size);
  read(tree, "model.channels", m.backbone.channels);
  read(tree, "model.patch", m.backbone.patch);
  read(tree, "model.dim", m.backbone.dim);
  read(tree, "model.heads", m.backbone.heads);
  read(tree, "model.mlp_hidden", m.backbone.mlp_hidden);
  read(tree, "model.mid_channels", m.decoder.mid_channels);
  read(tree, "model.lm_dim", m.decoder.lm_dim);
  read(tree, "model.lm_heads", m.decoder.lm_heads);
  read(tree, "model.lm_blocks", m.decoder.lm_blocks);
  read(tree, "model.lm_mlp_hidden", m.decoder.lm_mlp_hidden);
  read(tree, "model.max_caption", m.decoder.max_caption);
  std::size_t det_grid = m.decoder.det_grid_h;
  read(tree, "model.det_grid", det_grid);
  m.decoder.det_grid_h = m.decoder.det_grid_w = det_grid;
  read(tree, "model.text_dim", m.text_dim);
  read(tree, "model.tau_align", m.tau_align);
  m.decoder = decoder_config_for(m.backbone, m.decoder);

  read(tree, "prototype.k", c.bank.k);
  read(tree, "prototype.tau_proto", c.bank.temperature);
  read(tree, "prototype.sigma", c.bank.sigma);
  read(tree, "prototype.max_iters", c.bank.max_iters);
  c.bank.seed = m.seed;

  auto& t = c.train;
  read(tree, "train.epochs", t.epochs);
  read(tree, "train.batch_size", t.batch_size);
  read(tree, "train.lr", t.lr);
  read(tree, "train.lr_encoder", t.lr_encoder);
  read(tree, "train.weight_decay", t.weight_decay);
  read(tree, "train.align_weight", t.align_weight);
  read(tree, "train.dwa_temperature", t.dwa_temperature);
  read(tree, "train.clip_norm", t.clip_norm);
  read(tree, "train.seed", t.seed);
  read(tree, "train.threads", t.threads);

  read_bool(tree, "ablation.proto", m.flags.proto);
  read_bool(tree, "ablation.tamg", m.flags.tamg);
  read_bool(tree, "ablation.det_guided", m.flags.det_guided);
  read_bool(tree, "ablation.align", m.flags.align);

  positive(c.data.n_pairs, "data.n_pairs");
  positive(m.backbone.patch, "model.patch");
  if (m.backbone.image_size % m.backbone.patch != 0) throw ConfigError("config: image_size must be a multiple of patch");
  if (m.backbone.heads == 0 || m.backbone.dim % m.backbone.heads != 0) throw ConfigError("config: dim must be divisible by heads");
  if (m.decoder.lm_heads == 0 || m.decoder.lm_dim % m.decoder.lm_heads != 0) {
    throw ConfigError("config: lm_dim must be divisible by lm_heads");
  }
  positive(det_grid, "model.det_grid");
  positive(m.tau_align, "model.tau_align");
  positive(c.bank.k, "prototype.k");
  positive(c.bank.temperature, "prototype.tau_proto");
  positive(c.bank.sigma, "prototype.sigma");
  positive(t.epochs, "train.epochs");
  positive(t.batch_size, "train.batch_size");
  positive(t.lr, "train.lr");
  positive(t.lr_encoder, "train.lr_encoder");
  positive(t.dwa_temperature, "train.dwa_temperature");
  positive(t.threads, "train.threads");
  if (t.weight_decay < 0 || t.align_weight < 0 || t.clip_norm < 0) {
    throw ConfigError("config: weight_decay, align_weight and clip_norm must be non-negative");
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_ini(ss.str());
}

std::string RunConfig::to_ini() const {
  std::ostringstream s;
  const auto& m = model;
  s << "[data]\n"
    << "n_pairs = " << data.n_pairs << "\n"
    << "seed = " << data.seed << "\n"
    << "mix = " << num(data.mix[0]) << "," << num(data.mix[1]) << "," << num(data.mix[2]) << "," << num(data.mix[3])
    << "\n\n[model]\n"
    << "seed = " << m.seed << "\n"
    << "image_size = " << m.backbone.image_size << "\n"
    << "channels = " << m.backbone.channels << "\n"
    << "patch = " << m.backbone.patch << "\n"
    << "dim = " << m.backbone.dim << "\n"
    << "heads = " << m.backbone.heads << "\n"
    << "mlp_hidden = " << m.backbone.mlp_hidden << "\n"
    << "mid_channels = " << m.decoder.mid_channels << "\n"
    << "lm_dim = " << m.decoder.lm_dim << "\n"
    << "lm_heads = " << m.decoder.lm_heads << "\n"
    << "lm_blocks = " << m.decoder.lm_blocks << "\n"
    << "lm_mlp_hidden = " << m.decoder.lm_mlp_hidden << "\n"
    << "max_caption = " << m.decoder.max_caption << "\n"
    << "det_grid = " << m.decoder.det_grid_h << "\n"
    << "text_dim = " << m.text_dim << "\n"
    << "tau_align = " << num(m.tau_align) << "\n\n[prototype]\n"
    << "k = " << bank.k << "\n"
    << "tau_proto = " << num(bank.temperature) << "\n"
    << "sigma = " << num(bank.sigma) << "\n"
    << "max_iters = " << bank.max_iters << "\n\n[train]\n"
    << "epochs = " << train.epochs << "\n"
    << "batch_size = " << train.batch_size << "\n"
    << "lr = " << num(train.lr) << "\n"
    << "lr_encoder = " << num(train.lr_encoder) << "\n"
    << "weight_decay = " << num(train.weight_decay) << "\n"
    << "align_weight = " << num(train.align_weight) << "\n"
    << "dwa_temperature = " << num(train.dwa_temperature) << "\n"
    << "clip_norm = " << num(train.clip_norm) << "\n"
    << "seed = " << train.seed << "\n"
    << "threads = " << train.threads << "\n\n[ablation]\n"
    << "proto = " << (m.flags.proto ? "true" : "false") << "\n"
    << "tamg = " << (m.flags.tamg ? "true" : "false") << "\n"
    << "det_guided = " << (m.flags.det_guided ? "true" : "false") << "\n"
    << "align = " << (m.flags.align ? "true" : "false") << "\n";
  return s.str();
}

nlohmann::json RunConfig::to_json() const {
  return {{"data", {{"n_pairs", data.n_pairs}, {"seed", data.seed}, {"mix", data.mix}}},
          {"model", model.to_json()},
          {"prototype",
           {{"k", bank.k}, {"tau_proto", bank.temperature}, {"sigma", bank.sigma}, {"max_iters", bank.max_iters},
            {"seed", bank.seed}}},
          {"train", train.to_json()}};
}

}  // namespace ptnet
