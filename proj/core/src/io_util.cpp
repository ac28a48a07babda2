#include "modelmix/io_util.hpp"

#include <cctype>
#include <fstream>
#include <iterator>

namespace modelmix {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_pgm(const std::filesystem::path& path, const Grid<std::uint8_t>& pixels) {
  const std::string header = "P5\n" + std::to_string(pixels.w) + " " + std::to_string(pixels.h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), pixels.data.begin(), pixels.data.end());
  write_file_bytes(path, bytes);
}

Grid<std::uint8_t> read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw IoError(path.string() + ": malformed PGM header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw IoError(path.string() + ": not a binary PGM (P5) file");
  }
  pos = 2;
  const std::size_t w = read_int();
  const std::size_t h = read_int();
  const std::size_t maxval = read_int();
  if (maxval != 255) throw IoError(path.string() + ": unsupported PGM maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw IoError(path.string() + ": malformed PGM header");
  ++pos;
  if (bytes.size() - pos < w * h) {
    throw IoError("truncated image file " + path.string() + ": expected " + std::to_string(w * h) +
                  " pixel bytes, found " + std::to_string(bytes.size() - pos));
  }
  Grid<std::uint8_t> grid(h, w);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), w * h, grid.data.begin());
  return grid;
}

}  // namespace modelmix
