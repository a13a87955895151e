#pragma once

#include <string>

#include "ehtune/backbone.hpp"
#include "ehtune/pet.hpp"

namespace ehtune::io {

inline constexpr int kCheckpointFormat = 1;

// Writes `content` to a temporary file next to `path`, then renames it over
// `path`. Creates missing parent directories.
void write_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);  // Io error names the path

// Little-endian float32 bytes, standard base64 alphabet with padding.
std::string encode_floats(const std::vector<float>& values);
std::vector<float> decode_floats(const std::string& text);

// Checkpoint JSON: {"format_version", "config": {...}, "params": {name: {"shape", "data"}}}.
// Parameter names are written in lexicographic order.
std::string backbone_checkpoint(const model::Backbone& bb);
void save_backbone(const std::string& path, const model::Backbone& bb);

// Loads a backbone checkpoint. With `expected`, every tensor must have the
// shape that configuration implies; the first offending name is reported.
model::Backbone parse_backbone(const std::string& text, const model::BackboneConfig* expected = nullptr);
model::Backbone load_backbone(const std::string& path, const model::BackboneConfig* expected = nullptr);

// Backbone, head ("head." names) and any attached adapters ("adapter." names).
std::string model_checkpoint(const pet::Model& m);
void save_model(const std::string& path, const pet::Model& m);
pet::Model parse_model(const std::string& text);
pet::Model load_model(const std::string& path);

}  // namespace ehtune::io
