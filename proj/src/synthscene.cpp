#include "ptnet/synthscene.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "ptnet/container.hpp"
#include "ptnet/errors.hpp"
#include "ptnet/nn.hpp"
#include "ptnet/vocab.hpp"

namespace ptnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::array<std::array<const char*, kCaptionStyles>, 4> kTemplates = {{
    {"the two scenes seem identical", "the scene is the same as before", "there is no difference",
     "no change has occurred", "almost nothing has changed"},
    {"a block was added at the {}", "a new block appeared at the {}", "there is a new block at the {}",
     "a block has been built at the {}", "someone added a block at the {}"},
    {"a block was removed from the {}", "the block at the {} disappeared", "there is no longer a block at the {}",
     "a block has been demolished at the {}", "someone removed the block at the {}"},
    {"a block was recolored at the {}", "the block at the {} was repainted",
     "the color of the block at the {} is different", "a block has been painted at the {}",
     "someone recolored the block at the {}"},
}};

const std::array<std::set<std::string>, 4> kKeyWords = {{
    {"identical", "same", "difference", "nothing", "occurred"},
    {"added", "new", "built", "appeared"},
    {"removed", "disappeared", "longer", "demolished"},
    {"recolored", "repainted", "color", "painted"},
}};

std::size_t type_index(ChangeType t) { return static_cast<std::size_t>(t); }

using Color = std::array<double, 3>;

double block_channel(Rng& rng, bool high) { return high ? rng.uniform(0.85, 0.95) : rng.uniform(0.05, 0.15); }

Color block_color(Rng& rng) {
  Color c{};
  for (auto& v : c) v = block_channel(rng, rng.uniform() < 0.5);
  return c;
}

// A different color: a nonempty random subset of channels switches band.
Color recolor(const Color& c, Rng& rng) {
  Color out = c;
  const auto flips = static_cast<unsigned>(rng.integer(1, 7));
  for (std::size_t ch = 0; ch < 3; ++ch) {
    if (flips & (1u << ch)) out[ch] = block_channel(rng, c[ch] < 0.5);
  }
  return out;
}

std::vector<double> value_noise(Rng& rng, std::size_t size, std::size_t channels) {
  constexpr std::size_t kLattice = 5;
  std::vector<double> img(size * size * channels);
  for (std::size_t c = 0; c < channels; ++c) {
    std::array<double, kLattice * kLattice> lattice{};
    for (auto& v : lattice) v = rng.uniform(0.25, 0.65);
    for (std::size_t y = 0; y < size; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(size) * (kLattice - 1);
      const auto y0 = std::min<std::size_t>(static_cast<std::size_t>(fy), kLattice - 2);
      const double ty = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < size; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(size) * (kLattice - 1);
        const auto x0 = std::min<std::size_t>(static_cast<std::size_t>(fx), kLattice - 2);
        const double tx = fx - static_cast<double>(x0);
        const double a = lattice[y0 * kLattice + x0], b = lattice[y0 * kLattice + x0 + 1];
        const double d = lattice[(y0 + 1) * kLattice + x0], e = lattice[(y0 + 1) * kLattice + x0 + 1];
        img[(y * size + x) * channels + c] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * d + tx * e);
      }
    }
  }
  return img;
}

void paint(std::vector<double>& img, std::size_t size, std::size_t channels, const Rect& r, const Color& color) {
  for (std::size_t y = r.y; y < r.y + r.h; ++y) {
    for (std::size_t x = r.x; x < r.x + r.w; ++x) {
      for (std::size_t c = 0; c < channels; ++c) img[(y * size + x) * channels + c] = color[c % 3];
    }
  }
}

Rect random_rect(Rng& rng, const SceneConfig& cfg) {
  Rect r;
  r.w = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(cfg.min_block), static_cast<std::int64_t>(cfg.max_block)));
  r.h = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(cfg.min_block), static_cast<std::int64_t>(cfg.max_block)));
  r.x = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(cfg.size - r.w)));
  r.y = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(cfg.size - r.h)));
  return r;
}

void round_to_float(std::vector<double>& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

std::string pair_id(std::size_t i) {
  std::ostringstream s;
  s << std::setw(6) << std::setfill('0') << i;
  return s.str();
}

std::vector<std::string> pair_files(const std::string& id) {
  const std::string base = "pairs/" + id + "/";
  return {base + "t1.ptn", base + "t2.ptn", base + "mask.pgm", base + "captions.txt"};
}

json scene_json(const SceneConfig& s) {
  return {{"size", s.size},
          {"channels", s.channels},
          {"min_block", s.min_block},
          {"max_block", s.max_block},
          {"max_distractors", s.max_distractors},
          {"min_area_ratio", s.min_area_ratio}};
}

}  // namespace

std::string to_string(ChangeType t) {
  switch (t) {
    case ChangeType::none: return "none";
    case ChangeType::add_block: return "add_block";
    case ChangeType::remove_block: return "remove_block";
    case ChangeType::recolor_region: return "recolor_region";
  }
  throw ConfigError("unknown change type");
}

ChangeType change_type_from_string(const std::string& name) {
  for (auto t : kChangeTypes) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError("unknown change type: " + name);
}

const std::array<std::string, 9>& cell_names() {
  static const std::array<std::string, 9> names = {"top left", "top",         "top right", "left",        "center",
                                                   "right",    "bottom left", "bottom",    "bottom right"};
  return names;
}

bool Rect::overlaps(const Rect& o, std::size_t margin) const {
  return x < o.x + o.w + margin && o.x < x + w + margin && y < o.y + o.h + margin && o.y < y + h + margin;
}

std::size_t mask_centroid_cell(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw ShapeError("mask_centroid_cell: mask size mismatch");
  double sy = 0, sx = 0, n = 0;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      if (!mask[y * width + x]) continue;
      sy += static_cast<double>(y) + 0.5;
      sx += static_cast<double>(x) + 0.5;
      n += 1;
    }
  }
  if (n == 0) throw ConfigError("mask_centroid_cell: empty mask");
  const auto row = std::min<std::size_t>(2, static_cast<std::size_t>(sy / n * 3.0 / static_cast<double>(height)));
  const auto col = std::min<std::size_t>(2, static_cast<std::size_t>(sx / n * 3.0 / static_cast<double>(width)));
  return row * 3 + col;
}

bool area_filter(const std::vector<std::uint8_t>& mask, ChangeType type, double min_ratio) {
  if (type == ChangeType::none) return true;
  if (mask.empty()) return false;
  const auto changed = static_cast<double>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
  return changed / static_cast<double>(mask.size()) >= min_ratio;
}

ScenePair generate_pair(std::uint64_t seed, ChangeType type, const SceneConfig& cfg) {
  if (cfg.size == 0 || cfg.channels == 0) throw ConfigError("generate_pair: empty image");
  if (cfg.min_block < 1 || cfg.min_block > cfg.max_block || cfg.max_block > cfg.size) {
    throw ConfigError("generate_pair: invalid block size range");
  }
  Rng rng(seed);
  ScenePair p;
  p.size = cfg.size;
  p.channels = cfg.channels;
  p.change_type = type;
  p.mask.assign(cfg.size * cfg.size, 0);
  const auto background = value_noise(rng, cfg.size, cfg.channels);

  std::optional<Rect> change;
  if (type != ChangeType::none) {
    for (;;) {
      const Rect r = random_rect(rng, cfg);
      std::vector<std::uint8_t> mask(cfg.size * cfg.size, 0);
      for (std::size_t y = r.y; y < r.y + r.h; ++y) {
        for (std::size_t x = r.x; x < r.x + r.w; ++x) mask[y * cfg.size + x] = 1;
      }
      if (area_filter(mask, type, cfg.min_area_ratio)) {
        change = r;
        p.mask = std::move(mask);
        break;
      }
      if (!cfg.regenerate_small) throw ConfigError("generate_pair: change footprint below the minimum area");
    }
  }

  p.image1 = background;
  const auto n_distractors = rng.integer(0, static_cast<std::int64_t>(cfg.max_distractors));
  for (std::int64_t i = 0; i < n_distractors; ++i) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const Rect d = random_rect(rng, cfg);
      if (change && d.overlaps(*change, 1)) continue;
      paint(p.image1, cfg.size, cfg.channels, d, block_color(rng));
      break;
    }
  }
  p.image2 = p.image1;

  if (change) {
    const Color c1 = block_color(rng);
    switch (type) {
      case ChangeType::add_block: paint(p.image2, cfg.size, cfg.channels, *change, c1); break;
      case ChangeType::remove_block: paint(p.image1, cfg.size, cfg.channels, *change, c1); break;
      case ChangeType::recolor_region:
        paint(p.image1, cfg.size, cfg.channels, *change, c1);
        paint(p.image2, cfg.size, cfg.channels, *change, recolor(c1, rng));
        break;
      case ChangeType::none: break;
    }
    p.cell = cell_names()[mask_centroid_cell(p.mask, cfg.size, cfg.size)];
  }
  round_to_float(p.image1);
  round_to_float(p.image2);
  for (std::size_t s = 0; s < kCaptionStyles; ++s) p.captions.push_back(render_caption(p, s));
  return p;
}

std::string render_caption(ChangeType type, const std::string& cell, std::size_t style) {
  if (style >= kCaptionStyles) throw ConfigError("render_caption: style must be in 0..4");
  std::string text = kTemplates[type_index(type)][style];
  if (const auto pos = text.find("{}"); pos != std::string::npos) {
    if (cell.empty()) throw ConfigError("render_caption: changed pair without a location");
    text.replace(pos, 2, cell);
  }
  return text;
}

std::string render_caption(const ScenePair& pair, std::size_t style) {
  return render_caption(pair.change_type, pair.cell, style);
}

std::vector<std::string> caption_words() {
  std::vector<std::string> words;
  std::set<std::string> seen;
  auto add = [&](const std::string& sentence) {
    for (auto& w : tokenize(sentence)) {
      if (seen.insert(w).second) words.push_back(w);
    }
  };
  for (const auto& group : kTemplates) {
    for (const char* t : group) add(t);
  }
  for (const auto& c : cell_names()) add(c);
  return words;
}

std::optional<ChangeType> classify_caption(const std::string& caption) {
  std::optional<ChangeType> found;
  const auto words = tokenize(caption);
  for (auto t : kChangeTypes) {
    const auto& keys = kKeyWords[type_index(t)];
    const bool hit = std::any_of(words.begin(), words.end(), [&](const auto& w) { return keys.count(w) != 0; });
    if (!hit) continue;
    if (found) return std::nullopt;  // contradictory key words
    found = t;
  }
  return found;
}

std::array<double, 4> parse_mix(const std::string& text) {
  std::array<double, 4> mix{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 4) throw ConfigError("mix: expected 4 comma-separated weights");
    try {
      std::size_t used = 0;
      mix[i] = std::stod(item, &used);
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("mix: not a number: '" + item + "'");
    }
    if (!(mix[i] >= 0.0) || !std::isfinite(mix[i])) throw ConfigError("mix: weights must be finite and non-negative");
    ++i;
  }
  if (i != 4) throw ConfigError("mix: expected 4 comma-separated weights");
  if (mix[0] + mix[1] + mix[2] + mix[3] <= 0.0) throw ConfigError("mix: weights sum to zero");
  return mix;
}

std::array<std::size_t, 4> mix_counts(std::size_t n, const std::array<double, 4>& mix) {
  double total = 0;
  for (double m : mix) {
    if (!(m >= 0.0)) throw ConfigError("mix: weights must be non-negative");
    total += m;
  }
  if (total <= 0.0) throw ConfigError("mix: weights sum to zero");
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> rem{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double exact = static_cast<double>(n) * mix[i] / total;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(counts[i]);
    used += counts[i];
  }
  while (used < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 4; ++i) {
      if (rem[i] > rem[best]) best = i;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++used;
  }
  return counts;
}

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const auto train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  const auto val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  return {train, val, n - train - val};
}

std::vector<const Sample*> Dataset::split(const std::string& name) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples) {
    if (s.split == name) out.push_back(&s);
  }
  return out;
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream s;
  for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return s.str();
}

std::string dataset_content_hash(const fs::path& root, const json& manifest) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256 init failed");
  }
  try {
    for (const auto& entry : manifest.at("pairs")) {
      for (const auto& f : entry.at("files")) {
        const auto rel = f.get<std::string>();
        if (!fs::exists(root / rel)) throw FormatError("dataset: missing file " + rel);
        const auto bytes = read_file_bytes(root / rel);
        EVP_DigestUpdate(ctx, rel.data(), rel.size());
        EVP_DigestUpdate(ctx, "\0", 1);
        EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
      }
    }
  } catch (...) {
    EVP_MD_CTX_free(ctx);
    throw;
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream s;
  for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return s.str();
}

json build_dataset(const fs::path& out, const DatasetConfig& config) {
  if (config.n_pairs < 10) throw ConfigError("build_dataset: at least 10 pairs are required");
  const auto counts = mix_counts(config.n_pairs, config.mix);
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw std::runtime_error(out.string() + " exists and is not a directory");
    if (!fs::is_empty(out) && !fs::exists(out / "manifest.json")) {
      throw std::runtime_error(out.string() + " is not empty and does not hold a dataset");
    }
    fs::remove_all(out / "pairs");
    fs::remove(out / "manifest.json");
  }
  fs::create_directories(out / "pairs");

  std::vector<ChangeType> types;
  for (std::size_t t = 0; t < 4; ++t) types.insert(types.end(), counts[t], kChangeTypes[t]);
  Rng shuffle_rng(mix_seed(config.seed, 0x5eed));
  for (std::size_t i = types.size(); i > 1; --i) {
    std::swap(types[i - 1], types[static_cast<std::size_t>(shuffle_rng.integer(0, static_cast<std::int64_t>(i - 1)))]);
  }
  const auto sizes = split_sizes(config.n_pairs);

  json manifest;
  manifest["generator_version"] = kGeneratorVersion;
  manifest["seed"] = config.seed;
  manifest["n_pairs"] = config.n_pairs;
  manifest["mix"] = config.mix;
  manifest["scene"] = scene_json(config.scene);
  manifest["splits"] = {{"train", sizes[0]}, {"val", sizes[1]}, {"test", sizes[2]}};
  json type_counts = json::object();
  for (std::size_t t = 0; t < 4; ++t) type_counts[to_string(kChangeTypes[t])] = counts[t];
  manifest["type_counts"] = type_counts;
  manifest["pairs"] = json::array();

  for (std::size_t i = 0; i < config.n_pairs; ++i) {
    const auto pair = generate_pair(mix_seed(config.seed, i + 1), types[i], config.scene);
    const auto id = pair_id(i);
    const auto files = pair_files(id);
    fs::create_directories(out / "pairs" / id);
    const Shape shape{pair.size, pair.size, pair.channels};
    write_file_bytes(out / files[0], encode_container(shape, pair.image1, DType::f32));
    write_file_bytes(out / files[1], encode_container(shape, pair.image2, DType::f32));
    write_mask_pgm(out / files[2], pair.mask, pair.size, pair.size);
    std::string text;
    for (const auto& c : pair.captions) text += c + "\n";
    write_file_bytes(out / files[3], std::vector<std::uint8_t>(text.begin(), text.end()));
    const char* split = i < sizes[0] ? "train" : (i < sizes[0] + sizes[1] ? "val" : "test");
    manifest["pairs"].push_back({{"id", id},
                                 {"split", split},
                                 {"change_type", to_string(pair.change_type)},
                                 {"cell", pair.cell},
                                 {"files", files}});
  }
  manifest["content_hash"] = dataset_content_hash(out, manifest);
  const auto text = manifest.dump(2) + "\n";
  write_file_bytes(out / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  return manifest;
}

Dataset load_dataset(const fs::path& root, bool verify_hash) {
  const auto mpath = root / "manifest.json";
  if (!fs::exists(mpath)) throw FormatError("dataset: no manifest.json in " + root.string());
  Dataset ds;
  ds.root = root;
  try {
    const auto bytes = read_file_bytes(mpath);
    ds.manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset: malformed manifest: ") + e.what());
  }
  try {
    if (verify_hash && dataset_content_hash(root, ds.manifest) != ds.content_hash()) {
      throw FormatError("dataset: content hash mismatch in " + root.string());
    }
    for (const auto& entry : ds.manifest.at("pairs")) {
      Sample s;
      s.id = entry.at("id").get<std::string>();
      s.split = entry.at("split").get<std::string>();
      s.change_type = change_type_from_string(entry.at("change_type").get<std::string>());
      s.cell = entry.at("cell").get<std::string>();
      const auto files = entry.at("files").get<std::vector<std::string>>();
      if (files.size() != 4) throw FormatError("dataset: pair " + s.id + " must list 4 files");
      s.image1 = read_tensor(root / files[0]);
      s.image2 = read_tensor(root / files[1]);
      std::size_t h = 0, w = 0;
      s.mask = read_mask_pgm(root / files[2], &h, &w);
      if (s.image1.rank() != 3 || s.image1.shape() != s.image2.shape() || s.image1.dim(0) != h || s.image1.dim(1) != w) {
        throw FormatError("dataset: inconsistent shapes in pair " + s.id);
      }
      std::ifstream in(root / files[3]);
      if (!in) throw FormatError("dataset: missing captions for pair " + s.id);
      for (std::string line; std::getline(in, line);) {
        if (!line.empty()) s.captions.push_back(line);
      }
      if (s.captions.empty()) throw FormatError("dataset: pair " + s.id + " has no captions");
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset: malformed manifest: ") + e.what());
  } catch (const std::runtime_error& e) {
    if (dynamic_cast<const FormatError*>(&e)) throw;
    throw FormatError(std::string("dataset: ") + e.what());
  }
  return ds;
}

}  // namespace ptnet
