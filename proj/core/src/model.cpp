#include "meshseq/model.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "meshseq/rng.hpp"

namespace meshseq {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string block_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "block%02zu", i);
  return buf;
}

}  // namespace

KeyValues KeyValues::from_string(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    require(eq != std::string::npos, "config: missing '=' in line: " + line);
    kv.kv_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::from_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

std::string KeyValues::get(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (...) {
    throw Error("config: bad number for " + key + ": " + it->second);
  }
}

std::size_t KeyValues::get_size(const std::string& key, std::size_t fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (...) {
    throw Error("config: bad integer for " + key + ": " + it->second);
  }
}

std::vector<std::size_t> KeyValues::get_sizes(const std::string& key,
                                              std::vector<std::size_t> fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  std::vector<std::size_t> out;
  std::istringstream ss(it->second);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(tok)));
    } catch (...) {
      throw Error("config: bad list entry for " + key + ": " + tok);
    }
  }
  require(!out.empty(), "config: empty list for " + key);
  return out;
}

bool is_model_preset(const std::string& name) {
  return name == "toy" || name == "toy32" || name == "gpt2" || name == "vit_base" ||
         name == "vit_large";
}

ModelConfig model_preset(const std::string& name) {
  ModelConfig cfg;
  cfg.preset = name;
  if (name == "toy") {
    cfg.transformer = {2, 16, 2, 32, kMaxSlots};
    cfg.mesh.channels = {6, 8};
    cfg.mesh.levels = {{1, 6, 1}, {2, 6, 1}};
  } else if (name == "toy32") {
    cfg.transformer = {2, 32, 4, 64, kMaxSlots};
    cfg.mesh.channels = {8, 16};
    cfg.mesh.levels = {{1, 8, 1}, {2, 8, 1}};
  } else if (name == "gpt2" || name == "vit_base") {
    cfg.transformer = {12, 768, 12, 3072, kMaxSlots};
    cfg.mesh.channels = {16, 32, 64, 128};
    cfg.mesh.levels = {{1, 9, 1}, {2, 9, 1}, {2, 9, 1}, {2, 9, 1}};
  } else if (name == "vit_large") {
    cfg.transformer = {24, 1024, 16, 4096, kMaxSlots};
    cfg.mesh.channels = {16, 32, 64, 128};
    cfg.mesh.levels = {{1, 9, 1}, {2, 9, 1}, {2, 9, 1}, {2, 9, 1}};
  } else {
    throw Error("unknown model preset: " + name);
  }
  return cfg;
}

ModelConfig apply_key_values(ModelConfig cfg, const KeyValues& kv) {
  cfg.transformer.blocks = kv.get_size("transformer.blocks", cfg.transformer.blocks);
  cfg.transformer.dim = kv.get_size("transformer.dim", cfg.transformer.dim);
  cfg.transformer.hidden = kv.get_size("transformer.hidden", cfg.transformer.hidden);
  std::size_t default_heads = kv.has("transformer.dim")
                                  ? std::max<std::size_t>(1, cfg.transformer.dim / 64)
                                  : cfg.transformer.heads;
  cfg.transformer.heads = kv.get_size("transformer.heads", default_heads);

  cfg.mesh.channels = kv.get_sizes("mesh.channels", cfg.mesh.channels);
  auto factors = kv.get_sizes("mesh.downsample", {});
  auto lengths = kv.get_sizes("mesh.spiral_length", {});
  auto dils = kv.get_sizes("mesh.dilation", {});
  if (!factors.empty() || !lengths.empty() || !dils.empty()) {
    std::size_t n = std::max({factors.size(), lengths.size(), dils.size(),
                              cfg.mesh.levels.size()});
    std::vector<LevelSpec> levels(n);
    for (std::size_t i = 0; i < n; ++i) {
      LevelSpec base = i < cfg.mesh.levels.size() ? cfg.mesh.levels[i] : LevelSpec{};
      levels[i].downsample =
          static_cast<std::uint32_t>(i < factors.size() ? factors[i] : base.downsample);
      levels[i].spiral_length =
          static_cast<std::uint32_t>(i < lengths.size() ? lengths[i] : base.spiral_length);
      levels[i].dilation = static_cast<std::uint32_t>(i < dils.size() ? dils[i] : base.dilation);
    }
    cfg.mesh.levels = std::move(levels);
  }
  cfg.mesh.gamma_depth = kv.get_size("mesh.gamma_depth", cfg.mesh.gamma_depth);

  std::string norm = kv.get("norm.mode", cfg.norm_mode == NormMode::vertex ? "vertex" : "batch");
  if (norm == "vertex")
    cfg.norm_mode = NormMode::vertex;
  else if (norm == "batch")
    cfg.norm_mode = NormMode::batch;
  else
    throw Error("config: norm.mode must be vertex or batch, got " + norm);

  cfg.train.adam.lr = kv.get_double("train.lr", cfg.train.adam.lr);
  cfg.train.adam.beta1 = kv.get_double("train.adam_beta1", cfg.train.adam.beta1);
  cfg.train.adam.beta2 = kv.get_double("train.adam_beta2", cfg.train.adam.beta2);
  cfg.train.adam.eps = kv.get_double("train.adam_eps", cfg.train.adam.eps);
  cfg.train.epochs = kv.get_size("train.epochs", cfg.train.epochs);
  cfg.train.batch_size = kv.get_size("train.batch_size", cfg.train.batch_size);
  cfg.train.lambda_cda = kv.get_double("train.lambda_cda", cfg.train.lambda_cda);
  cfg.train.patience = kv.get_size("train.patience", cfg.train.patience);
  return cfg;
}

ModelConfig resolve_model_config(const std::string& name_or_path) {
  if (is_model_preset(name_or_path)) return model_preset(name_or_path);
  KeyValues kv = KeyValues::from_file(name_or_path);
  std::string base = kv.get("preset", "toy32");
  require(is_model_preset(base), "config: unknown preset " + base);
  ModelConfig cfg = apply_key_values(model_preset(base), kv);
  cfg.preset = base + "+" + name_or_path;
  validate_model_config(cfg);
  return cfg;
}

void validate_model_config(const ModelConfig& cfg) {
  require(cfg.transformer.blocks >= 1, "config: transformer.blocks must be >= 1");
  require(cfg.transformer.heads >= 1, "config: transformer.heads must be >= 1");
  require(cfg.transformer.dim % cfg.transformer.heads == 0,
          "config: transformer.dim must be divisible by head count");
  require(cfg.transformer.max_slots == kMaxSlots, "config: sequence length is fixed at 8 slots");
  require(!cfg.mesh.channels.empty(), "config: mesh.channels is empty");
  require(cfg.mesh.channels.size() == cfg.mesh.levels.size(),
          "config: mesh.channels and level specs must have equal length");
  require(cfg.mesh.gamma_depth >= 1, "config: mesh.gamma_depth must be >= 1");
}

std::string canonical_config(const ModelConfig& cfg) {
  std::ostringstream out;
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  out << "mesh.channels = ";
  for (std::size_t i = 0; i < cfg.mesh.channels.size(); ++i)
    out << (i ? "," : "") << cfg.mesh.channels[i];
  out << "\nmesh.dilation = ";
  for (std::size_t i = 0; i < cfg.mesh.levels.size(); ++i)
    out << (i ? "," : "") << cfg.mesh.levels[i].dilation;
  out << "\nmesh.downsample = ";
  for (std::size_t i = 0; i < cfg.mesh.levels.size(); ++i)
    out << (i ? "," : "") << cfg.mesh.levels[i].downsample;
  out << "\nmesh.gamma_depth = " << cfg.mesh.gamma_depth;
  out << "\nmesh.spiral_length = ";
  for (std::size_t i = 0; i < cfg.mesh.levels.size(); ++i)
    out << (i ? "," : "") << cfg.mesh.levels[i].spiral_length;
  out << "\nnorm.mode = " << (cfg.norm_mode == NormMode::vertex ? "vertex" : "batch");
  out << "\ntrain.adam_beta1 = " << num(cfg.train.adam.beta1);
  out << "\ntrain.adam_beta2 = " << num(cfg.train.adam.beta2);
  out << "\ntrain.adam_eps = " << num(cfg.train.adam.eps);
  out << "\ntrain.batch_size = " << cfg.train.batch_size;
  out << "\ntrain.epochs = " << cfg.train.epochs;
  out << "\ntrain.lambda_cda = " << num(cfg.train.lambda_cda);
  out << "\ntrain.lr = " << num(cfg.train.adam.lr);
  out << "\ntrain.patience = " << cfg.train.patience;
  out << "\ntransformer.blocks = " << cfg.transformer.blocks;
  out << "\ntransformer.dim = " << cfg.transformer.dim;
  out << "\ntransformer.heads = " << cfg.transformer.heads;
  out << "\ntransformer.hidden = " << cfg.transformer.hidden;
  out << '\n';
  return out.str();
}

std::uint64_t config_hash(const ModelConfig& cfg) { return fnv1a64(canonical_config(cfg)); }

bool is_transformer_param(const std::string& name) {
  return name.rfind("transformer.", 0) == 0;
}

bool is_transformer_ln_param(const std::string& name) {
  if (!is_transformer_param(name)) return false;
  return name.find(".ln1.") != std::string::npos || name.find(".ln2.") != std::string::npos ||
         name.find(".final_ln.") != std::string::npos;
}

std::vector<ParamSpec> transformer_param_specs(const TransformerConfig& cfg, bool frozen) {
  std::vector<ParamSpec> specs;
  const std::size_t d = cfg.dim, h = cfg.hidden;
  auto push = [&](const std::string& name, std::vector<std::size_t> shape) {
    specs.push_back({name, std::move(shape), true});
  };
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "transformer." + block_name(b) + ".";
    push(p + "ln1.gamma", {d});
    push(p + "ln1.beta", {d});
    push(p + "attn.wq", {d, d});
    push(p + "attn.bq", {d});
    push(p + "attn.wk", {d, d});
    push(p + "attn.bk", {d});
    push(p + "attn.wv", {d, d});
    push(p + "attn.bv", {d});
    push(p + "attn.wo", {d, d});
    push(p + "attn.bo", {d});
    push(p + "ln2.gamma", {d});
    push(p + "ln2.beta", {d});
    push(p + "mlp.w1", {h, d});
    push(p + "mlp.b1", {h});
    push(p + "mlp.w2", {d, h});
    push(p + "mlp.b2", {d});
  }
  push("transformer.final_ln.gamma", {d});
  push("transformer.final_ln.beta", {d});
  if (frozen)
    for (auto& s : specs) s.trainable = is_transformer_ln_param(s.name);
  return specs;
}

namespace {

void push_res_block_specs(std::vector<ParamSpec>& specs, const std::string& prefix,
                          std::size_t cin, std::size_t cout, std::size_t spiral_len,
                          std::size_t gamma_depth) {
  auto push = [&](const std::string& name, std::vector<std::size_t> shape) {
    specs.push_back({prefix + name, std::move(shape), true});
  };
  auto push_conv = [&](const std::string& conv, std::size_t in_ch, std::size_t out_ch) {
    push(conv + ".w0", {out_ch, spiral_len * in_ch});
    push(conv + ".b0", {out_ch});
    for (std::size_t k = 1; k < gamma_depth; ++k) {
      push(conv + ".w" + std::to_string(k), {out_ch, out_ch});
      push(conv + ".b" + std::to_string(k), {out_ch});
    }
  };
  push_conv("conv1", cin, cout);
  push("norm1.gamma", {cout});
  push("norm1.beta", {cout});
  push_conv("conv2", cout, cout);
  push("norm2.gamma", {cout});
  push("norm2.beta", {cout});
  if (cin != cout) {
    push("skip.w", {cout, cin});
    push("skip.b", {cout});
  }
}

}  // namespace

std::vector<ParamSpec> build_param_specs(const ModelConfig& cfg, const MeshHierarchy& hierarchy,
                                         const ModelSpecOptions& opts) {
  validate_model_config(cfg);
  require(hierarchy.level_count() == cfg.mesh.levels.size(),
          "build_param_specs: hierarchy level count does not match config");
  std::vector<ParamSpec> specs = transformer_param_specs(cfg.transformer, opts.frozen);

  const std::size_t levels = hierarchy.level_count();
  const std::size_t d = cfg.transformer.dim;
  const auto& ch = cfg.mesh.channels;
  for (std::size_t i = 0; i < levels; ++i) {
    const std::size_t cin = i == 0 ? 3 : ch[i - 1];
    const std::size_t l = hierarchy.levels[i].spirals.length;
    push_res_block_specs(specs, "mesh.enc.block" + std::to_string(i) + ".", cin, ch[i], l,
                         cfg.mesh.gamma_depth);
  }
  const std::size_t flat = hierarchy.vertex_count(levels - 1) * ch[levels - 1];
  specs.push_back({"mesh.enc.flatten.w", {d, flat}, true});
  specs.push_back({"mesh.enc.flatten.b", {d}, true});

  specs.push_back({"mesh.dec.expand.w", {flat, d}, true});
  specs.push_back({"mesh.dec.expand.b", {flat}, true});
  for (std::size_t i = levels; i-- > 0;) {
    const std::size_t cin = ch[i];
    const std::size_t cout = i == 0 ? ch[0] : ch[i - 1];
    const std::size_t l = hierarchy.levels[i].spirals.length;
    push_res_block_specs(specs, "mesh.dec.block" + std::to_string(i) + ".", cin, cout, l,
                         cfg.mesh.gamma_depth);
  }
  const std::size_t l0 = hierarchy.levels[0].spirals.length;
  specs.push_back({"mesh.dec.head.w0", {3, l0 * ch[0]}, true});
  specs.push_back({"mesh.dec.head.b0", {3}, true});

  specs.push_back({"embed.positional", {cfg.transformer.max_slots, d}, true});
  specs.push_back({"embed.cognitive", {kCognitiveRows, d}, true});

  if (opts.classifier_head) {
    specs.push_back({"classifier.head.w", {2, d}, true});
    specs.push_back({"classifier.head.b", {2}, true});
  }
  return specs;
}

ParamCount count_params(const std::vector<ParamSpec>& specs) {
  ParamCount c;
  for (const auto& s : specs) {
    c.total += s.size();
    if (s.trainable) c.trainable += s.size();
  }
  return c;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_bias_name(const std::string& name) {
  std::size_t dot = name.find_last_of('.');
  std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  return !leaf.empty() && leaf[0] == 'b';
}

}  // namespace

ParameterStore init_store(const std::vector<ParamSpec>& specs, std::uint64_t seed) {
  ParameterStore store;
  for (const auto& spec : specs) {
    Tensor t(spec.shape);
    Rng rng(stream_seed(seed, fnv1a64(spec.name)));
    if (ends_with(spec.name, ".gamma")) {
      t.fill(1.0);
    } else if (ends_with(spec.name, ".beta") || is_bias_name(spec.name)) {
      // zeros
    } else if (spec.name == "embed.positional" || spec.name == "embed.cognitive") {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 0.02);
    } else if (spec.shape.size() == 2) {
      const double s = 1.0 / std::sqrt(static_cast<double>(spec.shape[1]));
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-s, s);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, 0.02);
    }
    store.create(spec.name, std::move(t), spec.trainable);
  }
  return store;
}

}  // namespace meshseq
