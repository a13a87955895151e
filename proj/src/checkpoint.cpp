#include "ehtune/checkpoint.hpp"

#include <sodium.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ehtune/error.hpp"
#include "json.hpp"

namespace ehtune::io {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

using nlohmann::json;
namespace fs = std::filesystem;

void write_atomic(const std::string& path, const std::string& content) {
  const fs::path target(path);
  std::error_code ec;
  if (target.has_parent_path()) fs::create_directories(target.parent_path(), ec);
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) fail(ErrorKind::Io, "short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, target, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename '" + tmp.string() + "' to '" + path + "': " + ec.message());
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string encode_floats(const std::vector<float>& values) {
  const std::size_t bytes = values.size() * sizeof(float);
  std::string out(sodium_base64_ENCODED_LEN(bytes, sodium_base64_VARIANT_ORIGINAL), '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(values.data()), bytes,
                    sodium_base64_VARIANT_ORIGINAL);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::vector<float> decode_floats(const std::string& text) {
  std::vector<unsigned char> bytes(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  if (sodium_base642bin(bytes.data(), bytes.size(), text.data(), text.size(), nullptr, &len, nullptr,
                        sodium_base64_VARIANT_ORIGINAL) != 0) {
    fail(ErrorKind::Checkpoint, "malformed base64 payload");
  }
  if (len % sizeof(float) != 0) fail(ErrorKind::Checkpoint, "payload length is not a multiple of 4 bytes");
  std::vector<float> out(len / sizeof(float));
  std::memcpy(out.data(), bytes.data(), len);
  return out;
}

namespace {

json backbone_config_json(const model::BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"n_layers", c.n_layers},       {"d_ff", c.d_ff},
          {"dropout", c.dropout}};
}

template <typename T>
T get_field(const json& j, const char* key, const char* where) {
  if (!j.is_object() || !j.contains(key)) fail(ErrorKind::Checkpoint, std::string(where) + ": missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Checkpoint, std::string(where) + ": bad value for '" + key + "'");
  }
}

model::BackboneConfig backbone_config_from(const json& j) {
  model::BackboneConfig c;
  c.vocab_size = get_field<int>(j, "vocab_size", "backbone config");
  c.max_seq_len = get_field<int>(j, "max_seq_len", "backbone config");
  c.d_model = get_field<int>(j, "d_model", "backbone config");
  c.n_heads = get_field<int>(j, "n_heads", "backbone config");
  c.n_layers = get_field<int>(j, "n_layers", "backbone config");
  c.d_ff = get_field<int>(j, "d_ff", "backbone config");
  c.dropout = get_field<double>(j, "dropout", "backbone config");
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Checkpoint, std::string("checkpoint config: ") + e.what());
  }
  return c;
}

void put_store(json& params, const std::string& prefix, const ParamStore& store) {
  for (const auto& [name, t] : store) {
    params[prefix + name] = {{"shape", t.shape}, {"data", encode_floats(t.data)}};
  }
}

nc::Tensor tensor_from(const std::string& name, const json& j) {
  const auto shape = get_field<nc::Shape>(j, "shape", name.c_str());
  auto data = decode_floats(get_field<std::string>(j, "data", name.c_str()));
  try {
    return nc::Tensor(shape, std::move(data));
  } catch (const Error& e) {
    fail(ErrorKind::Checkpoint, "tensor '" + name + "': " + e.what());
  }
}

json parse_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Checkpoint, std::string("checkpoint is not valid JSON: ") + e.what());
  }
  const int version = get_field<int>(j, "format_version", "checkpoint");
  if (version != kCheckpointFormat) {
    fail(ErrorKind::Checkpoint, "unsupported checkpoint format_version " + std::to_string(version));
  }
  if (!j.contains("params") || !j["params"].is_object()) fail(ErrorKind::Checkpoint, "checkpoint: missing 'params'");
  return j;
}

// Fills `store` with the entries of `params` that start with `prefix`, checked
// against the layout of `reference` (same names and shapes).
void load_store(const json& params, const std::string& prefix, const ParamStore& reference, ParamStore& store,
                const char* what) {
  for (const auto& [name, ref] : reference) {
    const std::string key = prefix + name;
    if (!params.contains(key)) fail(ErrorKind::Checkpoint, std::string(what) + " tensor '" + key + "' missing from checkpoint");
    nc::Tensor t = tensor_from(key, params.at(key));
    if (t.shape != ref.shape) {
      fail(ErrorKind::Checkpoint, std::string(what) + " tensor '" + key + "' has shape " + nc::shape_str(t.shape) +
                                      " in checkpoint, expected " + nc::shape_str(ref.shape));
    }
    store.add(name, std::move(t));
  }
}

std::size_t count_prefixed(const json& params, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [key, _] : params.items()) n += key.rfind(prefix, 0) == 0;
  return n;
}

bool is_backbone_key(const std::string& key) { return pet::is_backbone_name(key); }

model::Backbone backbone_from(const json& j, const model::BackboneConfig* expected) {
  const model::BackboneConfig stored = backbone_config_from(j.at("config").at("backbone"));
  const model::BackboneConfig cfg = expected ? *expected : stored;
  // The reference layout is the one `cfg` implies; values are overwritten.
  const model::Backbone layout = model::build_backbone(cfg, 0);
  model::Backbone bb{cfg, {}};
  load_store(j["params"], "", layout.params, bb.params, "backbone");
  std::size_t present = 0;
  for (const auto& [key, _] : j["params"].items()) present += is_backbone_key(key);
  if (present != layout.params.size()) {
    for (const auto& [key, _] : j["params"].items()) {
      if (is_backbone_key(key) && !layout.params.contains(key)) {
        fail(ErrorKind::Checkpoint, "backbone tensor '" + key + "' is not part of the configured model");
      }
    }
  }
  if (expected && !(stored == *expected)) {
    fail(ErrorKind::Checkpoint, "checkpoint config " + backbone_config_json(stored).dump() +
                                    " does not match the configured backbone " + backbone_config_json(*expected).dump());
  }
  return bb;
}

}  // namespace

std::string backbone_checkpoint(const model::Backbone& bb) {
  json j;
  j["format_version"] = kCheckpointFormat;
  j["config"] = {{"backbone", backbone_config_json(bb.config)}};
  json params = json::object();
  put_store(params, "", bb.params);
  j["params"] = std::move(params);
  return j.dump() + "\n";
}

void save_backbone(const std::string& path, const model::Backbone& bb) { write_atomic(path, backbone_checkpoint(bb)); }

model::Backbone parse_backbone(const std::string& text, const model::BackboneConfig* expected) {
  const json j = parse_json(text);
  if (!j.contains("config") || !j["config"].contains("backbone")) fail(ErrorKind::Checkpoint, "checkpoint: missing backbone config");
  return backbone_from(j, expected);
}

model::Backbone load_backbone(const std::string& path, const model::BackboneConfig* expected) {
  const std::string text = read_file(path);
  try {
    return parse_backbone(text, expected);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Checkpoint) throw;
    fail(ErrorKind::Checkpoint, path + ": " + e.what());
  }
}

std::string model_checkpoint(const pet::Model& m) {
  json j;
  j["format_version"] = kCheckpointFormat;
  json cfg = {{"backbone", backbone_config_json(m.backbone.config)},
              {"head", {{"d_model", m.head.config.d_model}, {"d_mid", m.head.config.d_mid},
                        {"n_classes", m.head.config.n_classes}}}};
  if (m.lora) cfg["lora"] = {{"rank", m.lora->rank}, {"alpha", m.lora->alpha}};
  if (m.prefix) cfg["prefix"] = {{"length", m.prefix->length}};
  j["config"] = std::move(cfg);
  json params = json::object();
  put_store(params, "", m.backbone.params);
  put_store(params, "head.", m.head.params);
  if (m.lora) put_store(params, "adapter.", m.lora->params);
  if (m.prefix) put_store(params, "adapter.", m.prefix->params);
  j["params"] = std::move(params);
  return j.dump() + "\n";
}

void save_model(const std::string& path, const pet::Model& m) { write_atomic(path, model_checkpoint(m)); }

pet::Model parse_model(const std::string& text) {
  const json j = parse_json(text);
  if (!j.contains("config") || !j["config"].contains("head")) fail(ErrorKind::Checkpoint, "checkpoint: missing head config");
  pet::Model m{backbone_from(j, nullptr), {}, std::nullopt, std::nullopt};
  const json& hc = j["config"]["head"];
  model::HeadConfig head_cfg{get_field<int>(hc, "d_model", "head config"), get_field<int>(hc, "d_mid", "head config"),
                             get_field<int>(hc, "n_classes", "head config")};
  const model::Head head_layout = model::build_head(head_cfg, 0);
  m.head.config = head_cfg;
  load_store(j["params"], "head.", head_layout.params, m.head.params, "head");

  // Adapters are rebuilt through the attach functions to recover their layout.
  pet::Model layout{m.backbone, head_layout, std::nullopt, std::nullopt};
  std::size_t adapter_tensors = 0;
  if (j["config"].contains("lora")) {
    const json& lc = j["config"]["lora"];
    pet::attach_lora(layout, get_field<int>(lc, "rank", "lora config"), get_field<float>(lc, "alpha", "lora config"), 0);
    m.lora = model::LoraAdapter{layout.lora->rank, layout.lora->alpha, {}};
    load_store(j["params"], "adapter.", layout.lora->params, m.lora->params, "adapter");
    adapter_tensors += layout.lora->params.size();
  }
  if (j["config"].contains("prefix")) {
    pet::attach_prefix(layout, get_field<int>(j["config"]["prefix"], "length", "prefix config"), 0);
    m.prefix = model::PrefixState{layout.prefix->length, {}};
    load_store(j["params"], "adapter.", layout.prefix->params, m.prefix->params, "adapter");
    adapter_tensors += layout.prefix->params.size();
  }
  if (count_prefixed(j["params"], "adapter.") != adapter_tensors) {
    fail(ErrorKind::Checkpoint, "checkpoint holds adapter tensors not described by its config");
  }
  return m;
}

pet::Model load_model(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_model(text);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Checkpoint) throw;
    fail(ErrorKind::Checkpoint, path + ": " + e.what());
  }
}

}  // namespace ehtune::io
