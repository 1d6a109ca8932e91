#include "ptnet/checkpoint.hpp"

#include <iomanip>
#include <sstream>

#include "ptnet/container.hpp"
#include "ptnet/errors.hpp"

namespace ptnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kBankFormat = "ptnet-bank-1";
constexpr const char* kCheckpointFormat = "ptnet-checkpoint-1";

void write_json(const fs::path& path, const json& j) {
  const auto text = j.dump(2) + "\n";
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw FormatError("missing " + path.string());
  const auto bytes = read_file_bytes(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError("malformed " + path.string() + ": " + e.what());
  }
}

std::string indexed(std::size_t i, const char* suffix) {
  std::ostringstream s;
  s << std::setw(4) << std::setfill('0') << i << suffix;
  return s.str();
}

json backbone_json(const BackboneConfig& b) {
  return {{"image_size", b.image_size}, {"channels", b.channels}, {"patch", b.patch},
          {"dim", b.dim},               {"heads", b.heads},       {"mlp_hidden", b.mlp_hidden}};
}

BackboneConfig backbone_from_json(const json& j) {
  BackboneConfig b;
  b.image_size = j.at("image_size").get<std::size_t>();
  b.channels = j.at("channels").get<std::size_t>();
  b.patch = j.at("patch").get<std::size_t>();
  b.dim = j.at("dim").get<std::size_t>();
  b.heads = j.at("heads").get<std::size_t>();
  b.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  return b;
}

// Writes into `<dir>.partial` and swaps it in once complete.
template <typename F>
void write_dir_atomically(const fs::path& dir, F&& fill) {
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  fill(tmp);
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::rename(tmp, dir);
}

void fill_bank(const fs::path& dir, const PrototypeBank& bank, const BackboneConfig& backbone, std::uint64_t model_seed) {
  write_container(dir / "prototypes.ptn", bank.prototypes);
  write_container(dir / "centers.ptn", bank.clusters.centers);
  json j{{"format", kBankFormat},
         {"k", bank.k()},
         {"tokens", bank.tokens()},
         {"dim", bank.dim()},
         {"sigma", bank.sigma},
         {"tau_proto", bank.clusters.temperature},
         {"iterations", bank.clusters.iterations},
         {"inertia", bank.clusters.inertia},
         {"no_change_cluster", bank.no_change_cluster ? json(*bank.no_change_cluster) : json(nullptr)},
         {"provenance",
          {{"dataset_hash", bank.provenance.dataset_hash},
           {"k", bank.provenance.k},
           {"seed", bank.provenance.seed},
           {"samples", bank.provenance.samples}}},
         {"backbone", backbone_json(backbone)},
         {"model_seed", model_seed},
         {"files", {{"prototypes", "prototypes.ptn"}, {"centers", "centers.ptn"}}}};
  write_json(dir / "manifest.json", j);
}

}  // namespace

void save_bank(const fs::path& dir, const PrototypeBank& bank, const BackboneConfig& backbone, std::uint64_t model_seed) {
  write_dir_atomically(dir, [&](const fs::path& tmp) { fill_bank(tmp, bank, backbone, model_seed); });
}

BankFile load_bank(const fs::path& dir) {
  const auto j = read_json(dir / "manifest.json");
  try {
    if (j.at("format").get<std::string>() != kBankFormat) throw FormatError("not a prototype bank: " + dir.string());
    BankFile f;
    auto& b = f.bank;
    b.prototypes = read_tensor(dir / j.at("files").at("prototypes").get<std::string>());
    b.clusters.centers = read_tensor(dir / j.at("files").at("centers").get<std::string>());
    b.clusters.temperature = j.at("tau_proto").get<double>();
    b.clusters.iterations = j.at("iterations").get<std::size_t>();
    b.clusters.inertia = j.at("inertia").get<double>();
    b.sigma = j.at("sigma").get<double>();
    if (!j.at("no_change_cluster").is_null()) b.no_change_cluster = j.at("no_change_cluster").get<std::size_t>();
    const auto& p = j.at("provenance");
    b.provenance = {p.at("dataset_hash").get<std::string>(), p.at("k").get<std::size_t>(),
                    p.at("seed").get<std::uint64_t>(), p.at("samples").get<std::size_t>()};
    f.backbone = backbone_from_json(j.at("backbone"));
    f.model_seed = j.at("model_seed").get<std::uint64_t>();
    if (b.prototypes.rank() != 3 || b.clusters.centers.rank() != 2 || b.clusters.centers.dim(0) != b.k()) {
      throw FormatError("prototype bank tensors have inconsistent shapes");
    }
    return f;
  } catch (const json::exception& e) {
    throw FormatError("malformed bank manifest: " + std::string(e.what()));
  }
}

void save_checkpoint(const fs::path& dir, const PtNet& model, const TrainConfig& train, const TrainState& state,
                     const json& extra) {
  write_dir_atomically(dir, [&](const fs::path& tmp) {
    fs::create_directories(tmp / "params");
    fs::create_directories(tmp / "optimizer");
    json params = json::array();
    const auto& entries = model.params().entries();
    const auto& moments = state.optimizer.moments();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const auto file = "params/" + indexed(i, ".ptn");
      write_container(tmp / file, e.value);
      json row{{"name", e.name}, {"group", to_string(e.group)}, {"shape", e.value.shape()}, {"file", file}};
      if (i < moments.size() && !moments[i].m.empty()) {
        const auto mf = "optimizer/" + indexed(i, ".m.ptn"), vf = "optimizer/" + indexed(i, ".v.ptn");
        write_file_bytes(tmp / mf, encode_container(e.value.shape(), moments[i].m, DType::f64));
        write_file_bytes(tmp / vf, encode_container(e.value.shape(), moments[i].v, DType::f64));
        row["moments"] = {mf, vf};
      }
      params.push_back(std::move(row));
    }
    json bank = nullptr;
    if (model.bank()) {
      fs::create_directories(tmp / "bank");
      fill_bank(tmp / "bank", *model.bank(), model.config().backbone, model.config().seed);
      bank = "bank";
    }
    json history = json::array();
    for (const auto& h : state.dwa.history) history.push_back({h[0], h[1]});
    json j{{"format", kCheckpointFormat},
           {"model", model.config().to_json()},
           {"train", train.to_json()},
           {"epoch", state.epoch},
           {"optimizer_steps", state.optimizer.steps()},
           {"optimizer_state", !moments.empty()},
           {"dwa", {{"temperature", state.dwa.temperature}, {"history", history}}},
           {"vocabulary", model.vocab().words()},
           {"bank", bank},
           {"params", params},
           {"extra", extra}};
    write_json(tmp / "manifest.json", j);
  });
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto j = read_json(dir / "manifest.json");
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw FormatError("not a checkpoint: " + dir.string());
    const auto config = ModelConfig::from_json(j.at("model"));
    std::optional<PrototypeBank> bank;
    if (!j.at("bank").is_null()) bank = load_bank(dir / j.at("bank").get<std::string>()).bank;
    // The special tokens are re-added by the constructor.
    auto words = j.at("vocabulary").get<std::vector<std::string>>();
    if (words.size() < 4) throw FormatError("checkpoint vocabulary is truncated");
    words.erase(words.begin(), words.begin() + 4);
    Checkpoint ck{PtNet::create(config, Vocabulary(words), bank), TrainConfig::from_json(j.at("train")), {},
                  j.value("extra", json::object())};
    auto& store = ck.model.params();
    const auto& rows = j.at("params");
    if (rows.size() != store.size()) {
      throw FormatError("checkpoint holds " + std::to_string(rows.size()) + " parameters, model expects " +
                        std::to_string(store.size()));
    }
    const bool with_moments = j.value("optimizer_state", false);
    auto& moments = ck.state.optimizer.moments();
    if (with_moments) moments.resize(store.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& row = rows[i];
      const auto& e = store.entries()[i];
      if (row.at("name").get<std::string>() != e.name) {
        throw FormatError("checkpoint parameter " + row.at("name").get<std::string>() + " does not match " + e.name);
      }
      const auto data = read_container(dir / row.at("file").get<std::string>());
      if (data.shape != e.value.shape()) throw FormatError("checkpoint parameter " + e.name + " has the wrong shape");
      Tensor t = e.value;
      std::copy(data.values.begin(), data.values.end(), t.mutable_data().begin());
      if (with_moments && row.contains("moments")) {
        moments[i].m = read_container(dir / row.at("moments")[0].get<std::string>()).values;
        moments[i].v = read_container(dir / row.at("moments")[1].get<std::string>()).values;
      }
    }
    ck.state.optimizer.set_steps(j.at("optimizer_steps").get<std::uint64_t>());
    ck.state.epoch = j.at("epoch").get<std::size_t>();
    ck.state.dwa.temperature = j.at("dwa").at("temperature").get<double>();
    for (const auto& h : j.at("dwa").at("history")) ck.state.dwa.record(h.at(0).get<double>(), h.at(1).get<double>());
    return ck;
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace ptnet
