#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "modelmix/grid.hpp"

namespace modelmix {

/// File-system or format failure; the message names the file.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Binary 8-bit PGM (P5), maxval 255.
void write_pgm(const std::filesystem::path& path, const Grid<std::uint8_t>& pixels);
Grid<std::uint8_t> read_pgm(const std::filesystem::path& path);

}  // namespace modelmix
