// SPDX-License-Identifier: Apache-2.0
#include "btel/model.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace btel {

static_assert(sizeof(float) == 4, "binary32 floats required");

void ModelConfig::validate() const {
  if (n_layers < 1) throw InvalidConfig("n_layers must be >= 1");
  if (d_model < 2) throw InvalidConfig("d_model must be >= 2");
  if (n_heads < 1) throw InvalidConfig("n_heads must be >= 1");
  if (d_model % n_heads != 0)
    throw InvalidConfig("d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
  if (head_dim() % 2 != 0)
    throw InvalidConfig("head dimension must be even (rotary pairs)");
  if (d_ff < 1) throw InvalidConfig("d_ff must be >= 1");
  if (max_context < 2) throw InvalidConfig("max_context must be >= 2");
  if (vocab_size < 1) throw InvalidConfig("vocab_size must be >= 1");
}

std::vector<TensorLayout> tensor_layout(const ModelConfig& cfg) {
  std::vector<TensorLayout> out;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  std::size_t offset = 0;
  auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    out.push_back({name, offset, rows, cols});
    offset += rows * cols;
  };
  add("wte", v, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1_g", 1, d);
    add(p + "ln1_b", 1, d);
    add(p + "wq", d, d);
    add(p + "wk", d, d);
    add(p + "wv", d, d);
    add(p + "wo", d, d);
    add(p + "ln2_g", 1, d);
    add(p + "ln2_b", 1, d);
    add(p + "w1", f, d);
    add(p + "w2", d, f);
  }
  add("lnf_g", 1, d);
  add("lnf_b", 1, d);
  return out;
}

std::size_t param_count(const ModelConfig& cfg) {
  const auto layout = tensor_layout(cfg);
  return layout.back().offset + layout.back().size();
}

void LrSchedule::validate() const {
  if (!(initial_lr > 0)) throw InvalidConfig("initial_lr must be positive");
  for (std::size_t i = 1; i < halving_steps.size(); ++i)
    if (halving_steps[i] <= halving_steps[i - 1])
      throw InvalidConfig("halving_steps must be strictly increasing");
}

Model make_model(const ModelConfig& cfg, std::uint64_t vocab_hash) {
  Model m;
  m.config = cfg;
  init_params(cfg, m.params);
  m.opt.reset(m.params.data.size());
  m.vocab_hash = vocab_hash;
  return m;
}

std::vector<float> forward_logits(const Model& model, const TokenSeq& tokens) {
  Activations<float> acts;
  forward(model.config, model.params, tokens, acts);
  return acts.logits;
}

namespace {

constexpr char kMagic[4] = {'B', 'T', 'E', 'L'};
constexpr std::uint16_t kFormatVersion = 1;

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"n_layers", cfg.n_layers},     {"d_model", cfg.d_model},
          {"n_heads", cfg.n_heads},       {"d_ff", cfg.d_ff},
          {"max_context", cfg.max_context}, {"vocab_size", cfg.vocab_size},
          {"init_seed", cfg.init_seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.max_context = j.at("max_context").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  return cfg;
}

void write_exact(std::ofstream& out, const void* p, std::size_t n,
                 const std::string& path) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failure on '" + path + "'");
}

void read_exact(std::ifstream& in, void* p, std::size_t n,
                const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw IoError("short read on '" + path + "'");
}

}  // namespace

void save_checkpoint(const Model& model, const CheckpointMeta& meta,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  nlohmann::json j;
  j["config"] = config_to_json(model.config);
  j["vocab_hash"] = std::to_string(model.vocab_hash);
  j["phase"] = meta.phase;
  j["step"] = meta.step;
  j["seed"] = std::to_string(meta.seed);
  j["opt_step"] = model.opt.step_count;
  const std::string meta_text = j.dump();

  write_exact(out, kMagic, 4, path);
  const std::uint16_t version = kFormatVersion;
  write_exact(out, &version, sizeof(version), path);
  const std::uint32_t meta_len = static_cast<std::uint32_t>(meta_text.size());
  write_exact(out, &meta_len, sizeof(meta_len), path);
  write_exact(out, meta_text.data(), meta_text.size(), path);
  const std::size_t n = model.params.data.size();
  write_exact(out, model.params.data.data(), n * sizeof(float), path);
  write_exact(out, model.opt.m.data(), n * sizeof(float), path);
  write_exact(out, model.opt.v.data(), n * sizeof(float), path);
  out.flush();
  if (!out) throw IoError("flush failure on '" + path + "'");
}

std::pair<Model, CheckpointMeta> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[4];
  read_exact(in, magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatVersionMismatch("'" + path + "' is not a BTEL checkpoint");
  std::uint16_t version = 0;
  read_exact(in, &version, sizeof(version), path);
  if (version != kFormatVersion)
    throw FormatVersionMismatch("unsupported checkpoint format version " +
                                std::to_string(version));
  std::uint32_t meta_len = 0;
  read_exact(in, &meta_len, sizeof(meta_len), path);
  std::string meta_text(meta_len, '\0');
  read_exact(in, meta_text.data(), meta_len, path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatVersionMismatch("corrupt checkpoint metadata: " +
                                std::string(e.what()));
  }

  CheckpointMeta meta;
  meta.config = config_from_json(j.at("config"));
  meta.config.validate();
  meta.vocab_hash = std::stoull(j.at("vocab_hash").get<std::string>());
  meta.phase = j.at("phase").get<std::string>();
  meta.step = j.at("step").get<std::int64_t>();
  meta.seed = std::stoull(j.at("seed").get<std::string>());

  Model model;
  model.config = meta.config;
  model.vocab_hash = meta.vocab_hash;
  const std::size_t n = param_count(meta.config);
  model.params.data.resize(n);
  model.opt.m.resize(n);
  model.opt.v.resize(n);
  read_exact(in, model.params.data.data(), n * sizeof(float), path);
  read_exact(in, model.opt.m.data(), n * sizeof(float), path);
  read_exact(in, model.opt.v.data(), n * sizeof(float), path);
  model.opt.step_count = j.at("opt_step").get<std::int64_t>();
  return {std::move(model), std::move(meta)};
}

}  // namespace btel
