#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

namespace fsadapt {

using Json = nlohmann::json;

std::string read_text_file(const std::filesystem::path& path);
std::vector<unsigned char> read_binary_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

/// Parses JSON text, mapping parse failures to FormatError with the byte
/// offset reported by the parser.
Json parse_json(const std::string& text, const std::string& what);

/// Shortest-safe decimal form: %.17g, always round-trips a double.
std::string format_double(double v);

/// Strict field reader for config objects. Every problem (wrong type,
/// invalid value, unknown key) is appended to a shared error list so a
/// single validation pass can report all violated keys.
class StrictObject {
 public:
  StrictObject(const Json& object, std::string path, std::vector<std::string>& errors);

  bool has(const char* key) const;

  template <typename T>
  void read(const char* key, T& out) {
    if (!object_ || !object_->contains(key)) return;
    seen_.insert(key);
    const Json& v = object_->at(key);
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.is_number_integer() &&
                                     !v.is_number_unsigned() && v.get<long long>() < 0)) {
        errors_.push_back(qualify(key) + (std::is_unsigned_v<T> ? ": expected a non-negative integer"
                                                                : ": expected an integer"));
        return;
      }
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) {
        errors_.push_back(qualify(key) + ": expected a number");
        return;
      }
    }
    try {
      out = v.get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(qualify(key) + ": wrong type");
    }
  }

  /// Nested object; returns nullptr (after recording an error) if the value
  /// is not an object.
  const Json* child(const char* key);

  void error(const char* key, const std::string& message) {
    errors_.push_back(qualify(key) + ": " + message);
  }

  /// Records every key that was never read as unknown.
  void finish();

  std::string qualify(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const Json* object_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

}  // namespace fsadapt
