#include "tsgp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tsgp/common.hpp"

namespace tsgp {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in native little-endian order");

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "TSGP-CHECKPOINT 1\n";

json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"head_dim", c.head_dim},     {"n_layers", c.n_layers},     {"d_ff", c.d_ff},
          {"max_positions", c.max_positions}, {"dropout", c.dropout}, {"seed", c.seed}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.head_dim = j.at("head_dim");
  c.n_layers = j.at("n_layers");
  c.d_ff = j.at("d_ff");
  c.max_positions = j.at("max_positions");
  c.dropout = j.at("dropout");
  c.seed = j.at("seed");
  c.validate();
  return c;
}

std::uint64_t payload_hash(const Mat<float>& m) {
  return fnv1a64(m.data(), static_cast<std::size_t>(m.size()) * sizeof(float));
}

void write_file(const std::filesystem::path& path, json header,
                const std::vector<NamedTensor<const Mat<float>>>& tensors) {
  json list = json::array();
  for (const auto& t : tensors)
    list.push_back({{"name", t.name}, {"shape", {t.value->rows(), t.value->cols()}}, {"fnv1a64", hex64(payload_hash(*t.value))}});
  header["tensors"] = std::move(list);
  header["vocabulary"] = std::vector<std::string>(vocab().tokens().begin(), vocab().tokens().end());
  header["vocab_hash"] = hex64(vocab().hash());
  const std::string h = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << kMagic << h.size() << ' ' << hex64(fnv1a64(h.data(), h.size())) << '\n' << h << '\n';
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.value->data()), static_cast<std::streamsize>(t.value->size() * sizeof(float)));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

struct RawFile {
  json header;
  std::string payload;
};

RawFile read_file(const std::filesystem::path& path, std::string_view kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string data = ss.str();
  const std::string where = "checkpoint " + path.string() + ": ";
  if (data.compare(0, kMagic.size(), kMagic) != 0) throw Error(where + "bad magic line");
  const auto nl = data.find('\n', kMagic.size());
  if (nl == std::string::npos) throw Error(where + "truncated header line");
  std::istringstream hl(data.substr(kMagic.size(), nl - kMagic.size()));
  std::size_t len = 0;
  std::string hash;
  if (!(hl >> len >> hash)) throw Error(where + "malformed header line");
  const std::size_t start = nl + 1;
  if (start + len + 1 > data.size() || data[start + len] != '\n') throw Error(where + "truncated header");
  const std::string h = data.substr(start, len);
  if (hex64(fnv1a64(h.data(), h.size())) != hash) throw Error(where + "header checksum mismatch");
  RawFile raw;
  try {
    raw.header = json::parse(h);
  } catch (const json::exception& e) {
    throw Error(where + "header is not valid JSON: " + e.what());
  }
  if (raw.header.value("format", "") != "tsgp-checkpoint" || raw.header.value("version", 0) != 1)
    throw Error(where + "unsupported format");
  if (raw.header.value("kind", "") != kind) throw Error(where + "expected a " + std::string(kind) + " file");
  if (raw.header.at("vocab_hash") != hex64(vocab().hash()) ||
      raw.header.at("vocabulary") != std::vector<std::string>(vocab().tokens().begin(), vocab().tokens().end()))
    throw Error(where + "vocabulary mismatch");
  raw.payload = data.substr(start + len + 1);
  return raw;
}

void read_tensors(const RawFile& raw, const std::vector<NamedTensor<Mat<float>>>& tensors, const std::string& where) {
  const json& list = raw.header.at("tensors");
  if (list.size() != tensors.size()) throw Error(where + "tensor count mismatch");
  std::size_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const json& t = list[i];
    Mat<float>& m = *tensors[i].value;
    if (t.at("name") != tensors[i].name) throw Error(where + "unexpected tensor " + t.at("name").get<std::string>());
    if (t.at("shape") != json{m.rows(), m.cols()}) throw Error(where + "shape mismatch for " + tensors[i].name);
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(float);
    if (offset + bytes > raw.payload.size()) throw Error(where + "truncated payload");
    std::memcpy(m.data(), raw.payload.data() + offset, bytes);
    offset += bytes;
    if (hex64(payload_hash(m)) != t.at("fnv1a64")) throw Error(where + "checksum mismatch for " + tensors[i].name);
  }
  if (offset != raw.payload.size()) throw Error(where + "trailing bytes after payload");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params, const CheckpointMeta& meta) {
  json header = {{"format", "tsgp-checkpoint"}, {"version", 1},         {"kind", "model"},
                 {"config", config_json(params.config)}, {"seed", meta.seed}, {"dims", meta.dims},
                 {"step", meta.step}};
  write_file(path, std::move(header), params.tensors());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string where = "checkpoint " + path.string() + ": ";
  const RawFile raw = read_file(path, "model");
  Checkpoint ck;
  try {
    ck.params = allocate_params<float>(config_from(raw.header.at("config")));
    ck.meta.seed = raw.header.at("seed");
    ck.meta.dims = raw.header.at("dims").get<std::vector<int>>();
    ck.meta.step = raw.header.at("step");
  } catch (const json::exception& e) {
    throw Error(where + "bad header field: " + e.what());
  }
  read_tensors(raw, ck.params.tensors(), where);
  if (!ck.params.all_finite()) throw Error(where + "non-finite parameter values");
  return ck;
}

void save_optimizer(const std::filesystem::path& path, const AdamWState<float>& st, const ModelConfig& cfg) {
  json header = {{"format", "tsgp-checkpoint"},
                 {"version", 1},
                 {"kind", "adamw"},
                 {"config", config_json(cfg)},
                 {"step", st.step},
                 {"beta1", st.cfg.beta1},
                 {"beta2", st.cfg.beta2},
                 {"eps", st.cfg.eps},
                 {"weight_decay", st.cfg.weight_decay},
                 {"base_lr", st.base_lr},
                 {"total_steps", st.total_steps}};
  auto tensors = st.m.tensors();
  for (auto& t : tensors) t.name = "m/" + t.name;
  for (auto& t : st.v.tensors()) tensors.push_back({"v/" + t.name, t.value});
  write_file(path, std::move(header), tensors);
}

AdamWState<float> load_optimizer(const std::filesystem::path& path, const ModelConfig& cfg) {
  const std::string where = "optimizer state " + path.string() + ": ";
  const RawFile raw = read_file(path, "adamw");
  AdamWState<float> st;
  try {
    if (config_from(raw.header.at("config")) != cfg) throw Error(where + "model config mismatch");
    st.m = allocate_params<float>(cfg);
    st.v = allocate_params<float>(cfg);
    st.step = raw.header.at("step");
    st.cfg.beta1 = raw.header.at("beta1");
    st.cfg.beta2 = raw.header.at("beta2");
    st.cfg.eps = raw.header.at("eps");
    st.cfg.weight_decay = raw.header.at("weight_decay");
    st.base_lr = raw.header.at("base_lr");
    st.total_steps = raw.header.at("total_steps");
  } catch (const json::exception& e) {
    throw Error(where + "bad header field: " + e.what());
  }
  auto tensors = st.m.tensors();
  for (auto& t : tensors) t.name = "m/" + t.name;
  for (auto& t : st.v.tensors()) tensors.push_back({"v/" + t.name, t.value});
  read_tensors(raw, tensors, where);
  return st;
}

}  // namespace tsgp
