#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/nn.hpp"

namespace r3p {

// Little-endian raw binary streams for checkpoints. Doubles are written as
// their IEEE-754 bit pattern, so a save/load cycle is exact.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    require<FormatError>(static_cast<bool>(out_), "cannot open ", path.string(), " for writing");
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void write(T value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }

  void write(const std::string& text) {
    write<std::uint64_t>(text.size());
    out_.write(text.data(), static_cast<std::streamsize>(text.size()));
  }

  void write(const std::vector<double>& values) {
    write<std::uint64_t>(values.size());
    out_.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)));
  }

  void write(const ConvStack& stack) {
    write<std::int32_t>(stack.in_channels());
    write<std::uint32_t>(static_cast<std::uint32_t>(stack.layers().size()));
    for (const auto& layer : stack.layers()) {
      write<std::uint8_t>(static_cast<std::uint8_t>(layer.kind));
      write<std::int32_t>(layer.out_channels);
      write<std::int32_t>(layer.kernel);
      write<std::uint8_t>(static_cast<std::uint8_t>(layer.activation));
    }
    write(stack.params());
  }

  void finish() {
    out_.flush();
    require<FormatError>(static_cast<bool>(out_), "write failed for ", path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    require<FormatError>(static_cast<bool>(in_), "cannot open ", path.string());
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T read() {
    T value{};
    in_.read(reinterpret_cast<char*>(&value), sizeof(T));
    require<FormatError>(static_cast<bool>(in_), "truncated file ", path_.string());
    return value;
  }

  std::string read_string() {
    const auto n = read<std::uint64_t>();
    require<FormatError>(n < (1u << 20), "corrupt string length in ", path_.string());
    std::string text(n, '\0');
    in_.read(text.data(), static_cast<std::streamsize>(n));
    require<FormatError>(static_cast<bool>(in_), "truncated file ", path_.string());
    return text;
  }

  std::vector<double> read_doubles() {
    const auto n = read<std::uint64_t>();
    require<FormatError>(n < (1ull << 32), "corrupt array length in ", path_.string());
    std::vector<double> values(n);
    in_.read(reinterpret_cast<char*>(values.data()),
             static_cast<std::streamsize>(n * sizeof(double)));
    require<FormatError>(static_cast<bool>(in_), "truncated file ", path_.string());
    return values;
  }

  ConvStack read_stack() {
    const int in_channels = read<std::int32_t>();
    const auto count = read<std::uint32_t>();
    require<FormatError>(count < 1024, "corrupt layer count in ", path_.string());
    std::vector<LayerSpec> layers;
    for (std::uint32_t i = 0; i < count; ++i) {
      LayerSpec spec;
      spec.kind = static_cast<LayerSpec::Kind>(read<std::uint8_t>());
      spec.out_channels = read<std::int32_t>();
      spec.kernel = read<std::int32_t>();
      spec.activation = static_cast<Activation>(read<std::uint8_t>());
      layers.push_back(spec);
    }
    ConvStack stack(in_channels, layers);
    auto params = read_doubles();
    require<FormatError>(params.size() == stack.params().size(),
                         "parameter count mismatch in ", path_.string());
    stack.params() = std::move(params);
    return stack;
  }

  void expect_magic(std::string_view magic, std::uint32_t version) {
    std::string found(magic.size(), '\0');
    in_.read(found.data(), static_cast<std::streamsize>(magic.size()));
    require<FormatError>(static_cast<bool>(in_) && found == magic, path_.string(),
                         " is not a ", magic, " file");
    const auto v = read<std::uint32_t>();
    require<FormatError>(v == version, path_.string(), " has format version ", v,
                         ", expected ", version);
  }

  void expect_end() {
    in_.peek();
    require<FormatError>(in_.eof(), "trailing bytes in ", path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

inline void write_magic(BinaryWriter& out, std::string_view magic, std::uint32_t version) {
  for (char ch : magic) out.write<char>(ch);
  out.write<std::uint32_t>(version);
}

}  // namespace r3p
