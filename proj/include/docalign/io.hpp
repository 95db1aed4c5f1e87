#pragma once

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "docalign/grid.hpp"

namespace docalign {

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_bytes(const std::filesystem::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

namespace detail {

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const Bytes& in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(in[offset + i]) << (8 * i);
  return v;
}

inline void put_f32(Bytes& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline float get_f32(const Bytes& in, std::size_t offset) { return std::bit_cast<float>(get_u32(in, offset)); }

}  // namespace detail

// Flow container: "DAFL", u32 width, u32 height, then H*W (dx, dy) f32
// pairs in row-major order; all little-endian.
inline constexpr std::array<char, 4> kFlowMagic{'D', 'A', 'F', 'L'};
inline constexpr std::size_t kFlowHeaderBytes = 12;

inline Bytes encode_flow(const FlowField<float>& flow) {
  Bytes out;
  out.reserve(kFlowHeaderBytes + flow.size() * 4);
  out.insert(out.end(), kFlowMagic.begin(), kFlowMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(flow.width()));
  detail::put_u32(out, static_cast<std::uint32_t>(flow.height()));
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      detail::put_f32(out, flow.x(y, x));
      detail::put_f32(out, flow.y(y, x));
    }
  }
  return out;
}

inline FlowField<float> decode_flow(const Bytes& bytes) {
  if (bytes.size() < kFlowHeaderBytes) {
    throw ParseError("flow file truncated at byte offset " + std::to_string(bytes.size()) + ": header needs " +
                     std::to_string(kFlowHeaderBytes) + " bytes");
  }
  if (!std::equal(kFlowMagic.begin(), kFlowMagic.end(), bytes.begin())) {
    throw ParseError("bad flow magic at byte offset 0 (expected \"DAFL\")");
  }
  const std::uint32_t width = detail::get_u32(bytes, 4);
  const std::uint32_t height = detail::get_u32(bytes, 8);
  if (width == 0 || width > (1u << 16)) throw ParseError("invalid flow width " + std::to_string(width) + " at byte offset 4");
  if (height == 0 || height > (1u << 16)) throw ParseError("invalid flow height " + std::to_string(height) + " at byte offset 8");
  const std::size_t payload = std::size_t(width) * height * 8;
  if (bytes.size() != kFlowHeaderBytes + payload) {
    throw ParseError("flow payload size mismatch at byte offset " + std::to_string(kFlowHeaderBytes) + ": expected " +
                     std::to_string(payload) + " bytes, found " + std::to_string(bytes.size() - kFlowHeaderBytes));
  }
  FlowField<float> flow(static_cast<int>(height), static_cast<int>(width));
  std::size_t offset = kFlowHeaderBytes;
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      flow.x(y, x) = detail::get_f32(bytes, offset);
      flow.y(y, x) = detail::get_f32(bytes, offset + 4);
      offset += 8;
    }
  }
  return flow;
}

inline void write_flow(const FlowField<float>& flow, const std::filesystem::path& path) {
  write_bytes(path, encode_flow(flow));
}

inline FlowField<float> read_flow(const std::filesystem::path& path) {
  try {
    return decode_flow(read_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// 8-bit raster codecs

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Interleaved 8-bit pixels <-> planar float image.
inline Bytes interleave_u8(const Image<float>& image) {
  const int c = image.channels();
  Bytes out(image.plane_size() * c);
  for (std::size_t k = 0; k < image.plane_size(); ++k) {
    for (int ch = 0; ch < c; ++ch) out[k * c + ch] = to_u8(image.plane(ch)[k]);
  }
  return out;
}

inline Image<float> deinterleave_u8(const std::uint8_t* px, int channels, int height, int width) {
  Image<float> image(channels, height, width);
  for (std::size_t k = 0; k < image.plane_size(); ++k) {
    for (int ch = 0; ch < channels; ++ch) image.plane(ch)[k] = px[k * channels + ch] / 255.0f;
  }
  return image;
}

// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
inline Image<float> quantize_u8(const Image<float>& image) {
  Image<float> out = image;
  for (auto& v : out.data()) v = to_u8(v) / 255.0f;
  return out;
}

inline Bytes encode_png(const Image<float>& image) {
  png_image desc;
  std::memset(&desc, 0, sizeof(desc));
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(image.width());
  desc.height = static_cast<png_uint_32>(image.height());
  desc.format = image.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const Bytes pixels = interleave_u8(image);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&desc, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png encode failed: ") + desc.message);
  }
  Bytes out(size);
  if (!png_image_write_to_memory(&desc, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png encode failed: ") + desc.message);
  }
  out.resize(size);
  return out;
}

// Decodes any PNG into 1 (gray) or 3 (RGB) channels; alpha is composited away.
inline Image<float> decode_png(const Bytes& bytes) {
  png_image desc;
  std::memset(&desc, 0, sizeof(desc));
  desc.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&desc, bytes.data(), bytes.size())) {
    throw ParseError(std::string("png decode failed: ") + desc.message);
  }
  const bool gray = (desc.format & PNG_FORMAT_FLAG_COLOR) == 0;
  desc.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  Bytes pixels(PNG_IMAGE_SIZE(desc));
  png_color white{255, 255, 255};
  if (!png_image_finish_read(&desc, &white, pixels.data(), 0, nullptr)) {
    throw ParseError(std::string("png decode failed: ") + desc.message);
  }
  return deinterleave_u8(pixels.data(), channels, static_cast<int>(desc.height), static_cast<int>(desc.width));
}

namespace detail {

struct JpegErrorTrap {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

extern "C" inline void jpeg_trap_exit(j_common_ptr cinfo) {
  auto* trap = reinterpret_cast<JpegErrorTrap*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, trap->message);
  std::longjmp(trap->jump, 1);
}

// Only trivially destructible locals live between setjmp and the libjpeg calls.
inline bool jpeg_compress_raw(const std::uint8_t* px, int width, int height, int channels, int quality,
                              unsigned char** out, unsigned long* out_size, char* message) {
  jpeg_compress_struct cinfo;
  JpegErrorTrap trap;
  cinfo.err = jpeg_std_error(&trap.mgr);
  trap.mgr.error_exit = jpeg_trap_exit;
  if (setjmp(trap.jump)) {
    std::strncpy(message, trap.message, JMSG_LENGTH_MAX);
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, out, out_size);
  cinfo.image_width = static_cast<JDIMENSION>(width);
  cinfo.image_height = static_cast<JDIMENSION>(height);
  cinfo.input_components = channels;
  cinfo.in_color_space = channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(px + std::size_t(cinfo.next_scanline) * width * channels);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

inline bool jpeg_decompress_raw(const std::uint8_t* data, std::size_t size, std::uint8_t* px, std::size_t capacity,
                                int* width, int* height, int* channels, char* message) {
  jpeg_decompress_struct cinfo;
  JpegErrorTrap trap;
  cinfo.err = jpeg_std_error(&trap.mgr);
  trap.mgr.error_exit = jpeg_trap_exit;
  if (setjmp(trap.jump)) {
    std::strncpy(message, trap.message, JMSG_LENGTH_MAX);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, static_cast<unsigned long>(size));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  *width = static_cast<int>(cinfo.output_width);
  *height = static_cast<int>(cinfo.output_height);
  *channels = cinfo.output_components;
  const std::size_t needed = std::size_t(*width) * (*height) * (*channels);
  if (px == nullptr || needed > capacity) {
    jpeg_abort_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return true;
  }
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = px + std::size_t(cinfo.output_scanline) * (*width) * (*channels);
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace detail

inline Bytes encode_jpeg(const Image<float>& image, int quality) {
  if (quality < 1 || quality > 100) throw InvalidArgument("jpeg quality must be in [1, 100]");
  const Bytes pixels = interleave_u8(image);
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  char message[JMSG_LENGTH_MAX] = {};
  const bool ok = detail::jpeg_compress_raw(pixels.data(), image.width(), image.height(), image.channels(), quality,
                                            &buffer, &size, message);
  Bytes out;
  if (ok) out.assign(buffer, buffer + size);
  std::free(buffer);
  if (!ok) throw IoError(std::string("jpeg encode failed: ") + message);
  return out;
}

inline Image<float> decode_jpeg(const Bytes& bytes) {
  int width = 0, height = 0, channels = 0;
  char message[JMSG_LENGTH_MAX] = {};
  if (!detail::jpeg_decompress_raw(bytes.data(), bytes.size(), nullptr, 0, &width, &height, &channels, message)) {
    throw ParseError(std::string("jpeg decode failed: ") + message);
  }
  Bytes pixels(std::size_t(width) * height * channels);
  if (!detail::jpeg_decompress_raw(bytes.data(), bytes.size(), pixels.data(), pixels.size(), &width, &height,
                                   &channels, message)) {
    throw ParseError(std::string("jpeg decode failed: ") + message);
  }
  return deinterleave_u8(pixels.data(), channels, height, width);
}

inline void write_png(const Image<float>& image, const std::filesystem::path& path) {
  write_bytes(path, encode_png(image));
}

// Reads PNG or JPEG, sniffing the signature rather than trusting the extension.
inline Image<float> read_image(const std::filesystem::path& path) {
  const Bytes bytes = read_bytes(path);
  try {
    if (bytes.size() >= 2 && bytes[0] == 0xFF && bytes[1] == 0xD8) return decode_jpeg(bytes);
    return decode_png(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace docalign
