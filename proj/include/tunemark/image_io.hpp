#pragma once

#include <jpeglib.h>
#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "tunemark/common.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

// 8-bit interleaved RGB image.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // height * width * 3
};

// Round-half-even quantization of a unit-interval value to 8 bits.
inline uint8_t quantize_u8(float v) {
  const double scaled = static_cast<double>(v) * 255.0;
  double r = std::nearbyint(scaled);  // default FP environment: ties-to-even
  if (r < 0.0) r = 0.0;
  if (r > 255.0) r = 255.0;
  return static_cast<uint8_t>(r);
}

inline float dequantize_u8(uint8_t q) { return static_cast<float>(q) / 255.0f; }

// (C,H,W) float [0,1] -> interleaved 8-bit RGB.
inline ImageU8 to_u8(const Tensor<float>& chw) {
  require(chw.rank() == 3 && chw.dim(0) == 3, "to_u8 expects (3,H,W)");
  ImageU8 img;
  img.height = chw.dim(1);
  img.width = chw.dim(2);
  img.rgb.resize(static_cast<size_t>(img.height) * img.width * 3);
  const long plane = static_cast<long>(img.height) * img.width;
  for (long p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      img.rgb[static_cast<size_t>(p) * 3 + c] = quantize_u8(chw[c * plane + p]);
    }
  }
  return img;
}

inline Tensor<float> to_float(const ImageU8& img) {
  Tensor<float> chw({3, img.height, img.width});
  const long plane = static_cast<long>(img.height) * img.width;
  for (long p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      chw[c * plane + p] = dequantize_u8(img.rgb[static_cast<size_t>(p) * 3 + c]);
    }
  }
  return chw;
}

inline void write_png(const std::string& path, const ImageU8& img) {
  png_image pimg;
  std::memset(&pimg, 0, sizeof(pimg));
  pimg.version = PNG_IMAGE_VERSION;
  pimg.width = static_cast<png_uint_32>(img.width);
  pimg.height = static_cast<png_uint_32>(img.height);
  pimg.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pimg, path.c_str(), 0, img.rgb.data(), 0, nullptr)) {
    throw data_error("png write failed: " + path + ": " + pimg.message);
  }
}

inline ImageU8 read_png(const std::string& path) {
  png_image pimg;
  std::memset(&pimg, 0, sizeof(pimg));
  pimg.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pimg, path.c_str())) {
    throw data_error("png open failed: " + path + ": " + pimg.message);
  }
  pimg.format = PNG_FORMAT_RGB;
  ImageU8 img;
  img.width = static_cast<int>(pimg.width);
  img.height = static_cast<int>(pimg.height);
  img.rgb.resize(PNG_IMAGE_SIZE(pimg));
  if (!png_image_finish_read(&pimg, nullptr, img.rgb.data(), 0, nullptr)) {
    throw data_error("png read failed: " + path + ": " + pimg.message);
  }
  return img;
}

namespace detail {
struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};
inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}
}  // namespace detail

inline std::vector<uint8_t> jpeg_encode(const ImageU8& img, int quality) {
  require(quality >= 1 && quality <= 100, "jpeg quality must be in [1,100]");
  jpeg_compress_struct cinfo;
  detail::JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = detail::jpeg_error_exit;
  unsigned char* buf = nullptr;
  unsigned long buf_size = 0;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_compress(&cinfo);
    free(buf);
    throw data_error("jpeg encode failed");
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buf, &buf_size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const size_t stride = static_cast<size_t>(img.width) * 3;
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(&img.rgb[cinfo.next_scanline * stride]);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<uint8_t> out(buf, buf + buf_size);
  free(buf);
  return out;
}

inline ImageU8 jpeg_decode(const std::vector<uint8_t>& bytes) {
  jpeg_decompress_struct cinfo;
  detail::JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = detail::jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw data_error("jpeg decode failed");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  ImageU8 img;
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  const size_t stride = static_cast<size_t>(img.width) * 3;
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = &img.rgb[cinfo.output_scanline * stride];
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

}  // namespace tunemark
