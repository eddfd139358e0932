#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pkue {

// ---------------------------------------------------------------------------
// Error hierarchy. Every failure mode surfaced by the library derives from
// Error so callers can catch broadly at stage boundaries or narrowly in tests.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class MissingFileError : public Error {
 public:
  explicit MissingFileError(const std::string& path)
      : Error("missing file: " + path), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io failure: " + what) {}
};

class SchemaViolationError : public Error {
 public:
  SchemaViolationError(std::size_t line, const std::string& field,
                       const std::string& detail)
      : Error("schema violation at line " + std::to_string(line) + ", field '" +
              field + "': " + detail),
        line_(line),
        field_(field) {}
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class InvariantViolationError : public Error {
 public:
  explicit InvariantViolationError(const std::string& what)
      : Error("invariant violation: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error("config error: " + what) {}
};

class StageFailureError : public Error {
 public:
  StageFailureError(const std::string& stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit digest. Used for file digests in manifests and parameter
// digests in train reports; not cryptographic, just stable and cheap.
// ---------------------------------------------------------------------------

class Digest {
 public:
  void update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001b3ULL;
    }
  }

  void update(std::string_view text) { update(text.data(), text.size()); }

  std::uint64_t value() const { return state_; }

  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t v = state_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[v & 0xF];
      v >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string digest_bytes(std::string_view bytes) {
  Digest d;
  d.update(bytes);
  return d.hex();
}

inline std::string digest_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingFileError(path);
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return digest_bytes(buffer.str());
}

// ---------------------------------------------------------------------------
// Small file helpers.
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingFileError(path);
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) {
    std::filesystem::create_directories(p.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open for writing: " + path);
  }
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) {
    throw IoError("short write: " + path);
  }
}

// Marker search shared by the verdict parsers.
inline bool contains_any(std::string_view text,
                         std::initializer_list<std::string_view> needles) {
  for (auto needle : needles) {
    if (text.find(needle) != std::string_view::npos) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// UTF-8 helpers. Corpus text is Chinese, so "characters" throughout the
// library means Unicode scalar values, never bytes. Invalid bytes are
// tolerated and counted as one scalar each so filtering never throws on
// dirty input.
// ---------------------------------------------------------------------------

namespace utf8 {

inline std::size_t sequence_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // invalid lead byte, consume one
}

inline std::size_t scalar_count(std::string_view text) {
  std::size_t count = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    i += std::min(sequence_length(static_cast<unsigned char>(text[i])),
                  text.size() - i);
    ++count;
  }
  return count;
}

// Prefix of `text` containing at most `max_scalars` scalar values.
inline std::string truncate(std::string_view text, std::size_t max_scalars) {
  std::size_t count = 0;
  std::size_t i = 0;
  while (i < text.size() && count < max_scalars) {
    i += std::min(sequence_length(static_cast<unsigned char>(text[i])),
                  text.size() - i);
    ++count;
  }
  return std::string(text.substr(0, i));
}

// Splits into one std::string per scalar value (used by the character-level
// tokenizer).
inline std::vector<std::string> split_scalars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = std::min(
        sequence_length(static_cast<unsigned char>(text[i])), text.size() - i);
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

inline std::string encode_codepoint(std::uint32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

}  // namespace utf8

}  // namespace pkue
