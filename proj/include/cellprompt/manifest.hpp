// SPDX-License-Identifier: Apache-2.0
//
// Run manifests: one manifest.json per output directory recording the
// command, its configuration, inputs, outputs and the content hash of the
// checkpoint involved.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace cellprompt {

/// Hex SHA-1 of "blob <size>\0" + content, as computed by `git hash-object`.
std::string git_blob_sha1(const std::vector<std::uint8_t>& content);
std::string git_blob_sha1_file(const std::string& path);

struct RunManifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
  nlohmann::ordered_json outputs = nlohmann::ordered_json::object();
  std::string checkpoint_path;  // hashed when non-empty
};

/// Writes <dir>/manifest.json, replacing any previous manifest there.
void write_manifest(const std::string& dir, const RunManifest& m);

}  // namespace cellprompt
