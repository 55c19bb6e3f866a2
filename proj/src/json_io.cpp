#include "fsadapt/json_io.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "fsadapt/errors.hpp"

namespace fsadapt {

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<unsigned char> read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": malformed JSON at byte " + std::to_string(e.byte));
  }
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

StrictObject::StrictObject(const Json& object, std::string path, std::vector<std::string>& errors)
    : object_(&object), path_(std::move(path)), errors_(errors) {
  if (!object.is_object()) {
    errors_.push_back((path_.empty() ? std::string("<root>") : path_) + ": expected an object");
    object_ = nullptr;
  }
}

bool StrictObject::has(const char* key) const { return object_ && object_->contains(key); }

const Json* StrictObject::child(const char* key) {
  if (!has(key)) return nullptr;
  seen_.insert(key);
  const Json& v = object_->at(key);
  if (!v.is_object()) {
    errors_.push_back(qualify(key) + ": expected an object");
    return nullptr;
  }
  return &v;
}

void StrictObject::finish() {
  if (!object_) return;
  for (const auto& [key, value] : object_->items()) {
    if (!seen_.count(key)) errors_.push_back(qualify(key) + ": unknown key");
  }
}

}  // namespace fsadapt
