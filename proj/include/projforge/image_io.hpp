#pragma once

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "projforge/error.hpp"
#include "projforge/image.hpp"

namespace projforge {

/// Raised by load_image / save_image. `kind` distinguishes the failure.
class ImageIoError : public InputError {
 public:
  enum class Kind { kMissingFile, kMalformedHeader, kUnsupportedDepth, kTruncated, kUnwritable };

  ImageIoError(Kind kind, const std::filesystem::path& path, const std::string& detail)
      : InputError(describe(kind) + " '" + path.string() + "'" + (detail.empty() ? "" : ": " + detail)),
        kind_(kind),
        path_(path) {}

  Kind kind() const { return kind_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  static std::string describe(Kind kind) {
    switch (kind) {
      case Kind::kMissingFile: return "missing image file";
      case Kind::kMalformedHeader: return "malformed image header in";
      case Kind::kUnsupportedDepth: return "unsupported bit depth in";
      case Kind::kTruncated: return "truncated pixel data in";
      case Kind::kUnwritable: return "cannot write image";
    }
    return "image error";
  }

  Kind kind_;
  std::filesystem::path path_;
};

/// 8-bit quantization, round half up.
inline unsigned char quantize_u8(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::floor(clamped * 255.0 + 0.5));
}

namespace detail {

// Reads one whitespace-delimited header token, skipping '#' comments.
inline bool read_pnm_token(std::istream& in, std::string& token) {
  token.clear();
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (std::isspace(ch)) {
      ch = in.get();
    } else {
      break;
    }
  }
  while (ch != EOF && !std::isspace(ch) && ch != '#') {
    token.push_back(static_cast<char>(ch));
    ch = in.get();
  }
  // The single whitespace after maxval has been consumed here, as PNM requires.
  return !token.empty();
}

inline int parse_positive(const std::string& token, const std::filesystem::path& path,
                          const char* field) {
  int value = 0;
  try {
    std::size_t used = 0;
    value = std::stoi(token, &used);
    if (used != token.size()) throw std::invalid_argument(token);
  } catch (const std::exception&) {
    throw ImageIoError(ImageIoError::Kind::kMalformedHeader, path,
                       std::string("bad ") + field + " '" + token + "'");
  }
  if (value <= 0) {
    throw ImageIoError(ImageIoError::Kind::kMalformedHeader, path,
                       std::string("nonpositive ") + field);
  }
  return value;
}

}  // namespace detail

/// Loads a binary PPM (P6). Maxval up to 255 is accepted and rescaled;
/// 16-bit files are rejected.
inline ImageBuffer load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError(ImageIoError::Kind::kMissingFile, path, "");

  std::string token;
  if (!detail::read_pnm_token(in, token) || token != "P6") {
    throw ImageIoError(ImageIoError::Kind::kMalformedHeader, path, "expected magic 'P6'");
  }
  std::string w_tok, h_tok, max_tok;
  if (!detail::read_pnm_token(in, w_tok) || !detail::read_pnm_token(in, h_tok) ||
      !detail::read_pnm_token(in, max_tok)) {
    throw ImageIoError(ImageIoError::Kind::kMalformedHeader, path, "incomplete header");
  }
  const int width = detail::parse_positive(w_tok, path, "width");
  const int height = detail::parse_positive(h_tok, path, "height");
  const int maxval = detail::parse_positive(max_tok, path, "maxval");
  if (maxval > 255) {
    throw ImageIoError(ImageIoError::Kind::kUnsupportedDepth, path,
                       "maxval " + std::to_string(maxval) + " (only 8-bit is supported)");
  }

  const std::size_t count = static_cast<std::size_t>(width) * height * 3;
  std::vector<unsigned char> raw(count);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) {
    throw ImageIoError(ImageIoError::Kind::kTruncated, path,
                       "expected " + std::to_string(count) + " bytes");
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::min(1.0, static_cast<double>(raw[i]) / maxval);
  }
  return ImageBuffer(height, width, std::move(data));
}

inline void save_image(const ImageBuffer& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError(ImageIoError::Kind::kUnwritable, path, "");
  out << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  std::vector<unsigned char> raw(img.data().size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = quantize_u8(img.data()[i]);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw ImageIoError(ImageIoError::Kind::kUnwritable, path, "write failed");
}

}  // namespace projforge
