#include "mammovl/data/pdf.hpp"

#include "mammovl/errors.hpp"
#include "mammovl/log.hpp"

#include <jpeglib.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iterator>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

namespace mammovl::pdf {

namespace {

const Dict kEmptyDict;

ObjectPtr make(auto v) {
  auto o = std::make_shared<Object>();
  o->value = std::move(v);
  return o;
}

bool is_ws(char c) { return c == ' ' || c == '\n' || c == '\r' || c == '\t' || c == '\f' || c == '\0'; }
bool is_delim(char c) {
  return c == '(' || c == ')' || c == '<' || c == '>' || c == '[' || c == ']' || c == '{' || c == '}' ||
         c == '/' || c == '%';
}
bool is_regular(char c) { return !is_ws(c) && !is_delim(c); }

[[noreturn]] void fail(const std::string& msg) { throw ExtractionError("PDF: " + msg); }

// ---------------------------------------------------------------------------
// Lexer / object parser

class Lexer {
 public:
  Lexer(std::string_view src, std::size_t pos = 0) : s_(src), pos_(pos) {}

  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }
  bool eof() { skip_ws(); return pos_ >= s_.size(); }

  void skip_ws() {
    while (pos_ < s_.size()) {
      if (is_ws(s_[pos_])) {
        ++pos_;
      } else if (s_[pos_] == '%') {
        while (pos_ < s_.size() && s_[pos_] != '\n' && s_[pos_] != '\r') ++pos_;
      } else {
        break;
      }
    }
  }

  /// Peeks a bare keyword (regular characters) without consuming it.
  std::string_view peek_keyword() {
    skip_ws();
    std::size_t e = pos_;
    while (e < s_.size() && is_regular(s_[e])) ++e;
    return s_.substr(pos_, e - pos_);
  }

  /// Parses one object. Bare keywords other than true/false/null are
  /// returned through `keyword` (used by the content-stream interpreter).
  ObjectPtr parse(std::string* keyword = nullptr, int depth = 0) {
    if (depth > 256) fail("nesting too deep");
    skip_ws();
    if (pos_ >= s_.size()) fail("unexpected end of data");
    const char c = s_[pos_];
    if (c == '/') return make(Name{parse_name()});
    if (c == '(') return make(parse_literal());
    if (c == '<') {
      if (pos_ + 1 < s_.size() && s_[pos_ + 1] == '<') return parse_dict(depth);
      return make(parse_hex());
    }
    if (c == '[') {
      ++pos_;
      Array a;
      for (;;) {
        skip_ws();
        if (pos_ >= s_.size()) fail("unterminated array");
        if (s_[pos_] == ']') {
          ++pos_;
          break;
        }
        a.push_back(parse(nullptr, depth + 1));
      }
      return make(std::move(a));
    }
    if (c == '+' || c == '-' || c == '.' || (c >= '0' && c <= '9')) return parse_number_or_ref();
    if (c == ')' || c == '>' || c == ']' || c == '{' || c == '}') {
      ++pos_;
      if (keyword) {
        *keyword = std::string(1, c);
        return nullptr;
      }
      fail(std::string("unexpected '") + c + "'");
    }
    const std::string_view kw = peek_keyword();
    pos_ += kw.size();
    if (kw == "true") return make(true);
    if (kw == "false") return make(false);
    if (kw == "null") return make(std::monostate{});
    if (keyword) {
      *keyword = std::string(kw);
      return nullptr;
    }
    fail("unexpected keyword '" + std::string(kw) + "'");
  }

 private:
  std::string parse_name() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && is_regular(s_[pos_])) {
      if (s_[pos_] == '#' && pos_ + 2 < s_.size() && std::isxdigit(static_cast<unsigned char>(s_[pos_ + 1])) &&
          std::isxdigit(static_cast<unsigned char>(s_[pos_ + 2]))) {
        out.push_back(static_cast<char>(std::stoi(std::string(s_.substr(pos_ + 1, 2)), nullptr, 16)));
        pos_ += 3;
      } else {
        out.push_back(s_[pos_++]);
      }
    }
    return out;
  }

  std::string parse_literal() {
    ++pos_;
    std::string out;
    int depth = 1;
    while (pos_ < s_.size()) {
      const char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) break;
        const char e = s_[pos_++];
        switch (e) {
          case 'n': out.push_back('\n'); break;
          case 'r': out.push_back('\r'); break;
          case 't': out.push_back('\t'); break;
          case 'b': out.push_back('\b'); break;
          case 'f': out.push_back('\f'); break;
          case '\r':
            if (pos_ < s_.size() && s_[pos_] == '\n') ++pos_;
            break;
          case '\n': break;
          default:
            if (e >= '0' && e <= '7') {
              int v = e - '0';
              for (int k = 0; k < 2 && pos_ < s_.size() && s_[pos_] >= '0' && s_[pos_] <= '7'; ++k)
                v = v * 8 + (s_[pos_++] - '0');
              out.push_back(static_cast<char>(v & 0xff));
            } else {
              out.push_back(e);
            }
        }
      } else if (c == '(') {
        ++depth;
        out.push_back(c);
      } else if (c == ')') {
        if (--depth == 0) return out;
        out.push_back(c);
      } else {
        out.push_back(c);
      }
    }
    fail("unterminated string");
  }

  std::string parse_hex() {
    ++pos_;
    std::string digits;
    while (pos_ < s_.size() && s_[pos_] != '>') {
      if (std::isxdigit(static_cast<unsigned char>(s_[pos_]))) digits.push_back(s_[pos_]);
      ++pos_;
    }
    if (pos_ >= s_.size()) fail("unterminated hex string");
    ++pos_;
    if (digits.size() % 2) digits.push_back('0');
    std::string out;
    for (std::size_t i = 0; i < digits.size(); i += 2)
      out.push_back(static_cast<char>(std::stoi(digits.substr(i, 2), nullptr, 16)));
    return out;
  }

  ObjectPtr parse_dict(int depth) {
    pos_ += 2;
    Dict d;
    for (;;) {
      skip_ws();
      if (pos_ + 1 < s_.size() && s_[pos_] == '>' && s_[pos_ + 1] == '>') {
        pos_ += 2;
        break;
      }
      if (pos_ >= s_.size()) fail("unterminated dictionary");
      if (s_[pos_] != '/') fail("dictionary key is not a name");
      std::string key = parse_name();
      skip_ws();
      if (pos_ + 1 < s_.size() && s_[pos_] == '>' && s_[pos_ + 1] == '>') {
        d[key] = make(std::monostate{});
        continue;
      }
      d[key] = parse(nullptr, depth + 1);
    }
    return make(std::move(d));
  }

  std::optional<double> read_number() {
    std::size_t e = pos_;
    while (e < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[e])) || s_[e] == '.' || s_[e] == '-' ||
                             s_[e] == '+'))
      ++e;
    std::string tok(s_.substr(pos_, e - pos_));
    pos_ = e;
    if (tok.empty()) return std::nullopt;
    try {
      return std::stod(tok);
    } catch (...) {
      return 0.0;  // malformed numbers such as "--5" read as zero
    }
  }

  static bool integral(std::string_view tok) {
    return !tok.empty() && std::all_of(tok.begin(), tok.end(), [](char ch) { return ch >= '0' && ch <= '9'; });
  }

  ObjectPtr parse_number_or_ref() {
    const std::size_t start = pos_;
    const double v = *read_number();
    const std::string_view first = s_.substr(start, pos_ - start);
    if (integral(first)) {
      // Look ahead for "<gen> R".
      const std::size_t save = pos_;
      skip_ws();
      const std::size_t gs = pos_;
      while (pos_ < s_.size() && s_[pos_] >= '0' && s_[pos_] <= '9') ++pos_;
      if (pos_ > gs) {
        const int gen = std::stoi(std::string(s_.substr(gs, pos_ - gs)));
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == 'R' && (pos_ + 1 >= s_.size() || !is_regular(s_[pos_ + 1]))) {
          ++pos_;
          return make(Ref{static_cast<int>(v), gen});
        }
      }
      pos_ = save;
    }
    return make(v);
  }

  std::string_view s_;
  std::size_t pos_;
};

// ---------------------------------------------------------------------------
// Filters

std::string inflate_bytes(const std::string& in) {
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) fail("zlib init failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  std::string out;
  std::array<char, 65536> buf{};
  int rc = Z_OK;
  do {
    zs.next_out = reinterpret_cast<Bytef*>(buf.data());
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    out.append(buf.data(), buf.size() - zs.avail_out);
  } while (rc == Z_OK && (zs.avail_in > 0 || zs.avail_out == 0));
  inflateEnd(&zs);
  if (rc != Z_STREAM_END && out.empty()) fail("corrupt Flate stream");
  return out;  // truncated streams keep whatever decoded
}

std::string deflate_bytes(const std::string& in) {
  uLongf size = compressBound(static_cast<uLong>(in.size()));
  std::string out(size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(out.data()), &size, reinterpret_cast<const Bytef*>(in.data()),
                static_cast<uLong>(in.size()), 9) != Z_OK)
    fail("zlib compression failed");
  out.resize(size);
  return out;
}

std::string ascii_hex(const std::string& in) {
  std::string digits;
  for (char c : in) {
    if (c == '>') break;
    if (std::isxdigit(static_cast<unsigned char>(c))) digits.push_back(c);
  }
  if (digits.size() % 2) digits.push_back('0');
  std::string out;
  for (std::size_t i = 0; i < digits.size(); i += 2)
    out.push_back(static_cast<char>(std::stoi(digits.substr(i, 2), nullptr, 16)));
  return out;
}

double number_or(const Dict& d, const char* key, double fallback) {
  const auto it = d.find(key);
  if (it == d.end() || !it->second) return fallback;
  const double* n = it->second->number();
  return n ? *n : fallback;
}

std::string unpredict(const std::string& in, const Dict* params) {
  if (!params) return in;
  const int predictor = static_cast<int>(number_or(*params, "Predictor", 1));
  if (predictor < 10) {
    if (predictor == 2) log::warn("PDF: TIFF predictor not supported; data left as is");
    return in;
  }
  const int colors = static_cast<int>(number_or(*params, "Colors", 1));
  const int bpc = static_cast<int>(number_or(*params, "BitsPerComponent", 8));
  const int columns = static_cast<int>(number_or(*params, "Columns", 1));
  const std::size_t bpp = std::max<std::size_t>(1, static_cast<std::size_t>(colors * bpc + 7) / 8);
  const std::size_t row = static_cast<std::size_t>(colors * bpc * columns + 7) / 8;
  std::string out;
  std::vector<std::uint8_t> prev(row, 0), cur(row);
  for (std::size_t p = 0; p + 1 <= in.size(); p += row + 1) {
    const int type = static_cast<std::uint8_t>(in[p]);
    const std::size_t n = std::min(row, in.size() - p - 1);
    std::fill(cur.begin(), cur.end(), 0);
    for (std::size_t i = 0; i < n; ++i) cur[i] = static_cast<std::uint8_t>(in[p + 1 + i]);
    for (std::size_t i = 0; i < row; ++i) {
      const int a = i >= bpp ? cur[i - bpp] : 0;
      const int b = prev[i];
      const int c = i >= bpp ? prev[i - bpp] : 0;
      int v = cur[i];
      switch (type) {
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          const int pa = std::abs(b - c), pb = std::abs(a - c), pc = std::abs(a + b - 2 * c);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default: break;
      }
      cur[i] = static_cast<std::uint8_t>(v & 0xff);
    }
    out.append(reinterpret_cast<const char*>(cur.data()), n);
    prev = cur;
  }
  return out;
}

struct Decoded {
  std::string bytes;
  std::string image_filter;  // DCTDecode / JPXDecode / ... left undecoded
};

// ---------------------------------------------------------------------------
// Document model

class Resolver {
 public:
  std::unordered_map<int, ObjectPtr> objects;

  ObjectPtr resolve(ObjectPtr o) const {
    for (int hops = 0; o && o->ref() && hops < 32; ++hops) {
      const auto it = objects.find(o->ref()->num);
      o = it == objects.end() ? nullptr : it->second;
    }
    return o;
  }

  ObjectPtr get(const Dict& d, const char* key) const {
    const auto it = d.find(key);
    return it == d.end() ? nullptr : resolve(it->second);
  }

  const Dict& dict(const Dict& d, const char* key) const {
    const auto o = get(d, key);
    return o && o->dict() ? *o->dict() : kEmptyDict;
  }

  double number(const Dict& d, const char* key, double fallback) const {
    const auto o = get(d, key);
    return o && o->number() ? *o->number() : fallback;
  }

  std::string name(const Dict& d, const char* key) const {
    const auto o = get(d, key);
    return o && o->name() ? o->name()->value : std::string();
  }

  Decoded decode(const Stream& s) const {
    Decoded out{s.data, {}};
    const auto filter = get(s.dict, "Filter");
    const auto parms = get(s.dict, "DecodeParms");
    std::vector<std::string> filters;
    std::vector<ObjectPtr> params;
    if (filter && filter->name()) {
      filters.push_back(filter->name()->value);
      params.push_back(parms);
    } else if (filter && filter->array()) {
      for (std::size_t i = 0; i < filter->array()->size(); ++i) {
        const auto f = resolve((*filter->array())[i]);
        if (f && f->name()) filters.push_back(f->name()->value);
        ObjectPtr p;
        if (parms && parms->array() && i < parms->array()->size()) p = resolve((*parms->array())[i]);
        params.push_back(p);
      }
    }
    for (std::size_t i = 0; i < filters.size(); ++i) {
      const std::string& f = filters[i];
      const Dict* p = params[i] && params[i]->dict() ? params[i]->dict() : nullptr;
      if (f == "FlateDecode" || f == "Fl") {
        out.bytes = unpredict(inflate_bytes(out.bytes), p);
      } else if (f == "ASCIIHexDecode" || f == "AHx") {
        out.bytes = ascii_hex(out.bytes);
      } else if (f == "DCTDecode" || f == "DCT" || f == "JPXDecode" || f == "CCITTFaxDecode" || f == "JBIG2Decode") {
        out.image_filter = f == "DCT" ? "DCTDecode" : f;
        return out;
      } else {
        fail("unsupported filter " + f);
      }
    }
    return out;
  }
};

// Parses the body of one indirect object starting after "obj".
ObjectPtr parse_indirect(std::string_view src, std::size_t& pos,
                         const std::function<std::optional<std::size_t>(const Ref&)>& length_of) {
  Lexer lx(src, pos);
  ObjectPtr o = lx.parse();
  std::size_t p = lx.pos();
  Lexer peek(src, p);
  if (o->dict() && peek.peek_keyword() == "stream") {
    peek.skip_ws();
    p = peek.pos() + 6;
    if (p < src.size() && src[p] == '\r') ++p;
    if (p < src.size() && src[p] == '\n') ++p;
    const Dict& d = *o->dict();
    std::optional<std::size_t> len;
    if (const auto it = d.find("Length"); it != d.end() && it->second) {
      if (it->second->number()) len = static_cast<std::size_t>(*it->second->number());
      else if (it->second->ref()) len = length_of(*it->second->ref());
    }
    std::size_t end = std::string_view::npos;
    if (len && p + *len <= src.size()) {
      Lexer after(src, p + *len);
      if (after.peek_keyword() == "endstream") end = p + *len;
    }
    if (end == std::string_view::npos) {
      const std::size_t e = src.find("endstream", p);
      if (e == std::string_view::npos) fail("stream without endstream");
      end = e;
      while (end > p && (src[end - 1] == '\n' || src[end - 1] == '\r')) --end;
    }
    Stream s{d, std::string(src.substr(p, end - p))};
    pos = src.find("endstream", end) + 9;
    return make(std::move(s));
  }
  pos = p;
  return o;
}

// Finds "<num> <gen> obj" headers; returns (num, offset after "obj").
std::vector<std::pair<int, std::size_t>> find_headers(std::string_view s) {
  std::vector<std::pair<int, std::size_t>> out;
  for (std::size_t at = s.find("obj"); at != std::string_view::npos; at = s.find("obj", at + 3)) {
    if (at + 3 < s.size() && is_regular(s[at + 3])) continue;
    std::size_t i = at;
    auto digits_back = [&](std::size_t& k) {
      const std::size_t end = k;
      while (k > 0 && s[k - 1] >= '0' && s[k - 1] <= '9') --k;
      return end - k;
    };
    auto ws_back = [&](std::size_t& k) {
      const std::size_t end = k;
      while (k > 0 && is_ws(s[k - 1])) --k;
      return end - k;
    };
    if (!ws_back(i) || !digits_back(i) || !ws_back(i)) continue;
    const std::size_t num_end = i;
    if (!digits_back(i)) continue;
    if (i > 0 && is_regular(s[i - 1])) continue;
    out.emplace_back(std::stoi(std::string(s.substr(i, num_end - i))), at + 3);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Images

data::GrayImage decode_jpeg(const std::string& bytes) {
  struct ErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
  };
  jpeg_decompress_struct cinfo{};
  ErrorMgr err{};
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = [](j_common_ptr c) {
    auto* e = reinterpret_cast<ErrorMgr*>(c->err);
    (*c->err->format_message)(c, e->message);
    std::longjmp(e->jump, 1);
  };
  data::GrayImage img;
  std::vector<std::uint8_t> row;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    fail(std::string("JPEG: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  const bool cmyk = cinfo.num_components == 4;
  cinfo.out_color_space = cmyk ? JCS_CMYK : JCS_GRAYSCALE;
  jpeg_start_decompress(&cinfo);
  img = data::GrayImage::filled(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height));
  row.resize(static_cast<std::size_t>(cinfo.output_width) * cinfo.output_components);
  const bool inverted = cmyk && cinfo.saw_Adobe_marker;
  while (cinfo.output_scanline < cinfo.output_height) {
    const int y = static_cast<int>(cinfo.output_scanline);
    JSAMPROW rp = row.data();
    jpeg_read_scanlines(&cinfo, &rp, 1);
    for (int x = 0; x < img.width; ++x) {
      if (!cmyk) {
        img.at(x, y) = row[static_cast<std::size_t>(x)] / 255.0f;
        continue;
      }
      float k[4];
      for (int ch = 0; ch < 4; ++ch) {
        const float v = row[static_cast<std::size_t>(x) * 4 + ch] / 255.0f;
        k[ch] = inverted ? 1.0f - v : v;
      }
      img.at(x, y) = std::clamp(1.0f - (0.3f * k[0] + 0.59f * k[1] + 0.11f * k[2] + k[3]), 0.0f, 1.0f);
    }
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

struct ColorSpace {
  int components = 1;
  std::string family = "DeviceGray";
  std::string lookup;  // Indexed palette
  int base_components = 1;
};

ColorSpace color_space(const Resolver& r, ObjectPtr cs) {
  ColorSpace out;
  cs = r.resolve(cs);
  if (!cs) return out;
  std::string fam;
  if (cs->name()) fam = cs->name()->value;
  else if (cs->array() && !cs->array()->empty() && (*cs->array())[0]->name()) fam = (*cs->array())[0]->name()->value;
  out.family = fam;
  if (fam == "DeviceGray" || fam == "G" || fam == "CalGray") out.components = 1;
  else if (fam == "DeviceRGB" || fam == "RGB" || fam == "CalRGB" || fam == "Lab") out.components = 3;
  else if (fam == "DeviceCMYK" || fam == "CMYK") out.components = 4;
  else if (fam == "ICCBased" && cs->array()->size() > 1) {
    const auto s = r.resolve((*cs->array())[1]);
    out.components = s && s->dict() ? static_cast<int>(r.number(*s->dict(), "N", 3)) : 3;
  } else if ((fam == "Indexed" || fam == "I") && cs->array()->size() > 3) {
    const ColorSpace base = color_space(r, (*cs->array())[1]);
    out.base_components = base.components;
    out.components = 1;
    const auto lk = r.resolve((*cs->array())[3]);
    if (lk && lk->string()) out.lookup = *lk->string();
    else if (lk && lk->stream()) out.lookup = r.decode(*lk->stream()).bytes;
  } else if (fam == "Separation" || fam == "DeviceN") {
    out.components = 1;
  }
  return out;
}

float to_gray(const ColorSpace& cs, const float* c) {
  switch (cs.components) {
    case 3: return 0.299f * c[0] + 0.587f * c[1] + 0.114f * c[2];
    case 4: return std::clamp(1.0f - (0.3f * c[0] + 0.59f * c[1] + 0.11f * c[2] + c[3]), 0.0f, 1.0f);
    default: return c[0];
  }
}

data::GrayImage decode_image(const Resolver& r, const Stream& s) {
  const Dict& d = s.dict;
  const int w = static_cast<int>(r.number(d, "Width", 0));
  const int h = static_cast<int>(r.number(d, "Height", 0));
  if (w <= 0 || h <= 0 || static_cast<long long>(w) * h > 200'000'000LL) fail("bad image dimensions");
  const Decoded dec = r.decode(s);
  if (dec.image_filter == "DCTDecode") return decode_jpeg(dec.bytes);
  if (!dec.image_filter.empty()) fail(dec.image_filter + " images are not supported");
  const auto mask = r.get(d, "ImageMask");
  const bool stencil = mask && std::holds_alternative<bool>(mask->value) && std::get<bool>(mask->value);
  const int bpc = stencil ? 1 : static_cast<int>(r.number(d, "BitsPerComponent", 8));
  const ColorSpace cs = stencil ? ColorSpace{} : color_space(r, r.get(d, "ColorSpace"));
  const int nc = cs.components;
  const std::size_t row_bytes = (static_cast<std::size_t>(w) * nc * bpc + 7) / 8;
  if (dec.bytes.size() < row_bytes * h) log::warn("PDF: image data shorter than declared; padding with zeros");
  bool invert = stencil;
  if (const auto decode = r.get(d, "Decode"); decode && decode->array() && decode->array()->size() >= 2) {
    const double* d0 = (*decode->array())[0]->number();
    const double* d1 = (*decode->array())[1]->number();
    if (d0 && d1 && *d0 > *d1) invert = !invert;
  }
  const double maxv = static_cast<double>((1u << bpc) - 1);
  auto sample = [&](int y, std::size_t idx) -> unsigned {
    const std::size_t bit = idx * static_cast<std::size_t>(bpc);
    const std::size_t byte = static_cast<std::size_t>(y) * row_bytes + bit / 8;
    auto at = [&](std::size_t k) -> unsigned { return k < dec.bytes.size() ? static_cast<std::uint8_t>(dec.bytes[k]) : 0u; };
    if (bpc == 8) return at(byte);
    if (bpc == 16) return (at(byte) << 8) | at(byte + 1);
    return (at(byte) >> (8 - bpc - bit % 8)) & ((1u << bpc) - 1);
  };
  data::GrayImage img = data::GrayImage::filled(w, h);
  std::array<float, 4> comp{};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float g;
      if (!cs.lookup.empty()) {
        const unsigned i = sample(y, static_cast<std::size_t>(x));
        ColorSpace base;
        base.components = cs.base_components;
        for (int c = 0; c < cs.base_components; ++c) {
          const std::size_t k = static_cast<std::size_t>(i) * cs.base_components + c;
          comp[c] = k < cs.lookup.size() ? static_cast<std::uint8_t>(cs.lookup[k]) / 255.0f : 0.0f;
        }
        g = to_gray(base, comp.data());
      } else {
        for (int c = 0; c < nc && c < 4; ++c)
          comp[c] = static_cast<float>(sample(y, static_cast<std::size_t>(x) * nc + c) / maxv);
        g = to_gray(cs, comp.data());
      }
      img.at(x, y) = invert ? 1.0f - g : g;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Fonts and text

struct Font {
  int code_bytes = 1;
  std::unordered_map<std::uint32_t, std::string> to_unicode;
  int first_char = 0;
  std::vector<double> widths;  // glyph space / 1000
  double default_width = 0.5;
};

void append_utf8(std::string& out, std::uint32_t cp) {
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
}

std::string utf16be_to_utf8(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i + 1 < s.size(); i += 2) {
    std::uint32_t u = (static_cast<std::uint8_t>(s[i]) << 8) | static_cast<std::uint8_t>(s[i + 1]);
    if (u >= 0xD800 && u < 0xDC00 && i + 3 < s.size()) {
      const std::uint32_t lo = (static_cast<std::uint8_t>(s[i + 2]) << 8) | static_cast<std::uint8_t>(s[i + 3]);
      u = 0x10000 + ((u - 0xD800) << 10) + (lo - 0xDC00);
      i += 2;
    }
    append_utf8(out, u);
  }
  return out;
}

std::uint32_t be_code(const std::string& s) {
  std::uint32_t v = 0;
  for (char c : s) v = (v << 8) | static_cast<std::uint8_t>(c);
  return v;
}

void parse_cmap(const std::string& text, Font& font) {
  Lexer lx(text);
  std::vector<ObjectPtr> operands;
  bool bfchar = false, bfrange = false;
  while (!lx.eof()) {
    std::string kw;
    ObjectPtr o;
    try {
      o = lx.parse(&kw);
    } catch (const ExtractionError&) {
      break;
    }
    if (o) {
      operands.push_back(o);
      continue;
    }
    if (kw == "begincodespacerange") {
      operands.clear();
    } else if (kw == "endcodespacerange") {
      if (!operands.empty() && operands[0]->string()) font.code_bytes = static_cast<int>(operands[0]->string()->size());
      operands.clear();
    } else if (kw == "beginbfchar") {
      bfchar = true;
      operands.clear();
    } else if (kw == "beginbfrange") {
      bfrange = true;
      operands.clear();
    } else if (kw == "endbfchar" && bfchar) {
      for (std::size_t i = 0; i + 1 < operands.size(); i += 2)
        if (operands[i]->string() && operands[i + 1]->string())
          font.to_unicode[be_code(*operands[i]->string())] = utf16be_to_utf8(*operands[i + 1]->string());
      bfchar = false;
      operands.clear();
    } else if (kw == "endbfrange" && bfrange) {
      for (std::size_t i = 0; i + 2 < operands.size(); i += 3) {
        if (!operands[i]->string() || !operands[i + 1]->string()) continue;
        const std::uint32_t lo = be_code(*operands[i]->string()), hi = be_code(*operands[i + 1]->string());
        if (hi < lo || hi - lo > 65535) continue;
        if (const auto* dst = operands[i + 2]->string()) {
          std::string base = *dst;
          for (std::uint32_t c = lo; c <= hi; ++c) {
            font.to_unicode[c] = utf16be_to_utf8(base);
            if (!base.empty()) base.back() = static_cast<char>(static_cast<std::uint8_t>(base.back()) + 1);
          }
        } else if (const auto* arr = operands[i + 2]->array()) {
          for (std::uint32_t c = lo; c <= hi && c - lo < arr->size(); ++c)
            if ((*arr)[c - lo]->string()) font.to_unicode[c] = utf16be_to_utf8(*(*arr)[c - lo]->string());
        }
      }
      bfrange = false;
      operands.clear();
    } else {
      if (!bfchar && !bfrange) operands.clear();
    }
  }
}

Font load_font(const Resolver& r, const Dict& fd) {
  Font f;
  if (r.name(fd, "Subtype") == "Type0") f.code_bytes = 2;
  if (const auto tu = r.get(fd, "ToUnicode"); tu && tu->stream()) {
    try {
      parse_cmap(r.decode(*tu->stream()).bytes, f);
    } catch (const ExtractionError& e) {
      log::warn(std::string("PDF: ignoring unreadable ToUnicode map: ") + e.what());
    }
  }
  f.first_char = static_cast<int>(r.number(fd, "FirstChar", 0));
  if (const auto w = r.get(fd, "Widths"); w && w->array())
    for (const auto& v : *w->array()) {
      const auto rv = r.resolve(v);
      f.widths.push_back(rv && rv->number() ? *rv->number() / 1000.0 : f.default_width);
    }
  return f;
}

// WinAnsi bytes that differ from Latin-1.
std::uint32_t win_ansi(std::uint8_t b) {
  static constexpr std::array<std::uint16_t, 32> k80{
      0x20AC, 0, 0x201A, 0x0192, 0x201E, 0x2026, 0x2020, 0x2021, 0x02C6, 0x2030, 0x0160, 0x2039, 0x0152, 0, 0x017D, 0,
      0, 0x2018, 0x2019, 0x201C, 0x201D, 0x2022, 0x2013, 0x2014, 0x02DC, 0x2122, 0x0161, 0x203A, 0x0153, 0, 0x017E, 0x0178};
  if (b >= 0x80 && b < 0xA0) return k80[b - 0x80] ? k80[b - 0x80] : 0x20;
  return b;
}

struct Matrix {
  double a = 1, b = 0, c = 0, d = 1, e = 0, f = 0;
  // this * m (row-vector convention used by PDF)
  Matrix operator*(const Matrix& m) const {
    return {a * m.a + b * m.c,       a * m.b + b * m.d,       c * m.a + d * m.c,
            c * m.b + d * m.d,       e * m.a + f * m.c + m.e, e * m.b + f * m.d + m.f};
  }
  std::pair<double, double> apply(double x, double y) const { return {a * x + c * y + e, b * x + d * y + f}; }
};

Matrix matrix_from(const std::vector<ObjectPtr>& ops, std::size_t at) {
  std::array<double, 6> v{};
  for (int i = 0; i < 6; ++i) {
    const double* n = ops[at + i]->number();
    v[i] = n ? *n : 0.0;
  }
  return {v[0], v[1], v[2], v[3], v[4], v[5]};
}

class ContentInterpreter {
 public:
  ContentInterpreter(const Resolver& r, Page& page) : r_(r), page_(page) {}

  void run(const std::string& content, const Dict& resources, const Matrix& ctm, int depth = 0) {
    if (depth > 12) return;
    struct GState {
      Matrix ctm;
    };
    std::vector<GState> stack;
    GState gs{ctm};
    Matrix tm, tlm;
    double leading = 0, char_space = 0, word_space = 0, hscale = 1, rise = 0, size = 0;
    const Font* font = nullptr;
    Font fallback;
    std::vector<ObjectPtr> ops;
    Lexer lx(content);

    auto show = [&](const std::vector<ObjectPtr>& items) {
      const Font& f = font ? *font : fallback;
      std::string text;
      double advance = 0;
      const Matrix start = tm;
      for (const auto& it : items) {
        if (const double* n = it->number()) {
          const double shift = -*n / 1000.0 * size * hscale;
          advance += shift;
          if (*n < -200 && !text.empty() && text.back() != ' ') text.push_back(' ');
          continue;
        }
        const std::string* s = it->string();
        if (!s) continue;
        for (std::size_t i = 0; i + f.code_bytes <= s->size(); i += static_cast<std::size_t>(f.code_bytes)) {
          const std::uint32_t code = be_code(s->substr(i, static_cast<std::size_t>(f.code_bytes)));
          if (const auto m = f.to_unicode.find(code); m != f.to_unicode.end()) text += m->second;
          else if (f.code_bytes == 1) append_utf8(text, win_ansi(static_cast<std::uint8_t>(code)));
          const int wi = static_cast<int>(code) - f.first_char;
          const double gw = wi >= 0 && wi < static_cast<int>(f.widths.size()) ? f.widths[static_cast<std::size_t>(wi)]
                                                                                 : f.default_width;
          advance += (gw * size + char_space + (code == 32 && f.code_bytes == 1 ? word_space : 0)) * hscale;
        }
      }
      tm = Matrix{1, 0, 0, 1, advance, 0} * tm;
      const Matrix trm = start * gs.ctm;
      const auto [x, y] = trm.apply(0, rise);
      const auto [x1, y1] = (tm * gs.ctm).apply(0, rise);
      const double scale = std::sqrt(std::abs(trm.a * trm.d - trm.b * trm.c));
      TextRun run;
      run.page = page_.number;
      run.text = std::move(text);
      run.x = x;
      run.y = y;
      run.size = size * scale;
      run.width = std::hypot(x1 - x, y1 - y);
      if (!run.text.empty()) page_.text.push_back(std::move(run));
    };

    while (!lx.eof()) {
      std::string kw;
      ObjectPtr o;
      try {
        o = lx.parse(&kw);
      } catch (const ExtractionError& e) {
        log::warn(std::string("PDF: content stream parse stopped early: ") + e.what());
        return;
      }
      if (o) {
        ops.push_back(o);
        continue;
      }
      auto num = [&](std::size_t i) {
        const double* n = i < ops.size() ? ops[i]->number() : nullptr;
        return n ? *n : 0.0;
      };
      if (kw == "q") {
        stack.push_back(gs);
      } else if (kw == "Q") {
        if (!stack.empty()) {
          gs = stack.back();
          stack.pop_back();
        }
      } else if (kw == "cm" && ops.size() >= 6) {
        gs.ctm = matrix_from(ops, ops.size() - 6) * gs.ctm;
      } else if (kw == "BT") {
        tm = tlm = Matrix{};
      } else if (kw == "Tf" && ops.size() >= 2) {
        size = num(ops.size() - 1);
        font = nullptr;
        if (const auto* n = ops[ops.size() - 2]->name()) font = font_for(resources, n->value);
      } else if (kw == "Td" && ops.size() >= 2) {
        tlm = Matrix{1, 0, 0, 1, num(ops.size() - 2), num(ops.size() - 1)} * tlm;
        tm = tlm;
      } else if (kw == "TD" && ops.size() >= 2) {
        leading = -num(ops.size() - 1);
        tlm = Matrix{1, 0, 0, 1, num(ops.size() - 2), num(ops.size() - 1)} * tlm;
        tm = tlm;
      } else if (kw == "Tm" && ops.size() >= 6) {
        tm = tlm = matrix_from(ops, ops.size() - 6);
      } else if (kw == "T*") {
        tlm = Matrix{1, 0, 0, 1, 0, -leading} * tlm;
        tm = tlm;
      } else if (kw == "TL" && !ops.empty()) {
        leading = num(ops.size() - 1);
      } else if (kw == "Tc" && !ops.empty()) {
        char_space = num(ops.size() - 1);
      } else if (kw == "Tw" && !ops.empty()) {
        word_space = num(ops.size() - 1);
      } else if (kw == "Tz" && !ops.empty()) {
        hscale = num(ops.size() - 1) / 100.0;
      } else if (kw == "Ts" && !ops.empty()) {
        rise = num(ops.size() - 1);
      } else if (kw == "Tj" && !ops.empty()) {
        show({ops.back()});
      } else if (kw == "'" && !ops.empty()) {
        tlm = Matrix{1, 0, 0, 1, 0, -leading} * tlm;
        tm = tlm;
        show({ops.back()});
      } else if (kw == "\"" && ops.size() >= 3) {
        word_space = num(ops.size() - 3);
        char_space = num(ops.size() - 2);
        tlm = Matrix{1, 0, 0, 1, 0, -leading} * tlm;
        tm = tlm;
        show({ops.back()});
      } else if (kw == "TJ" && !ops.empty() && ops.back()->array()) {
        show(*ops.back()->array());
      } else if (kw == "Do" && !ops.empty() && ops.back()->name()) {
        draw_xobject(ops.back()->name()->value, resources, gs.ctm, depth);
      } else if (kw == "BI") {
        skip_inline_image(lx, content);
      }
      ops.clear();
    }
  }

 private:
  const Font* font_for(const Dict& resources, const std::string& name) {
    const Dict& fonts = r_.dict(resources, "Font");
    const auto fo = r_.get(fonts, name.c_str());
    if (!fo || !fo->dict()) return nullptr;
    auto [it, inserted] = fonts_.try_emplace(fo.get());
    if (inserted) it->second = load_font(r_, *fo->dict());
    return &it->second;
  }

  void draw_xobject(const std::string& name, const Dict& resources, const Matrix& ctm, int depth) {
    const Dict& xobjects = r_.dict(resources, "XObject");
    const auto xo = r_.get(xobjects, name.c_str());
    if (!xo || !xo->stream()) return;
    const Stream& s = *xo->stream();
    const std::string subtype = r_.name(s.dict, "Subtype");
    if (subtype == "Image") {
      PlacedImage pi;
      pi.page = page_.number;
      pi.index = static_cast<int>(page_.images.size());
      double xs[4], ys[4];
      const double ux[4] = {0, 1, 0, 1}, uy[4] = {0, 0, 1, 1};
      for (int i = 0; i < 4; ++i) std::tie(xs[i], ys[i]) = ctm.apply(ux[i], uy[i]);
      pi.rect = {*std::min_element(xs, xs + 4), *std::min_element(ys, ys + 4), *std::max_element(xs, xs + 4),
                 *std::max_element(ys, ys + 4)};
      const Rect& mb = page_.media_box;
      pi.rect = {std::clamp(pi.rect.x0, mb.x0, mb.x1), std::clamp(pi.rect.y0, mb.y0, mb.y1),
                 std::clamp(pi.rect.x1, mb.x0, mb.x1), std::clamp(pi.rect.y1, mb.y0, mb.y1)};
      try {
        pi.image = decode_image(r_, s);
      } catch (const ExtractionError& e) {
        pi.decode_error = e.what();
      }
      page_.images.push_back(std::move(pi));
    } else if (subtype == "Form") {
      Matrix m;
      if (const auto mo = r_.get(s.dict, "Matrix"); mo && mo->array() && mo->array()->size() == 6)
        m = matrix_from(*mo->array(), 0);
      const auto res = r_.get(s.dict, "Resources");
      const Dict& form_res = res && res->dict() ? *res->dict() : resources;
      run(r_.decode(s).bytes, form_res, m * ctm, depth + 1);
    }
  }

  static void skip_inline_image(Lexer& lx, const std::string& content) {
    const std::size_t id = content.find("ID", lx.pos());
    if (id == std::string::npos) {
      lx.seek(content.size());
      return;
    }
    std::size_t p = id + 2;
    for (;;) {
      p = content.find("EI", p);
      if (p == std::string::npos) {
        lx.seek(content.size());
        return;
      }
      if (is_ws(content[p - 1]) && (p + 2 >= content.size() || !is_regular(content[p + 2]))) {
        lx.seek(p + 2);
        return;
      }
      p += 2;
    }
  }

  const Resolver& r_;
  Page& page_;
  std::unordered_map<const Object*, Font> fonts_;
};

Rect rect_from(const Resolver& r, ObjectPtr o) {
  o = r.resolve(o);
  if (!o || !o->array() || o->array()->size() != 4) return {0, 0, 612, 792};
  double v[4];
  for (int i = 0; i < 4; ++i) {
    const auto e = r.resolve((*o->array())[i]);
    v[i] = e && e->number() ? *e->number() : 0.0;
  }
  return {std::min(v[0], v[2]), std::min(v[1], v[3]), std::max(v[0], v[2]), std::max(v[1], v[3])};
}

}  // namespace

const Dict* Object::dict() const {
  if (const auto* d = std::get_if<Dict>(&value)) return d;
  if (const auto* s = std::get_if<Stream>(&value)) return &s->dict;
  return nullptr;
}

std::string decode_stream(const Stream& stream) {
  Resolver r;
  Decoded d = r.decode(stream);
  return d.bytes;
}

Document Document::parse(std::string bytes) {
  if (bytes.size() < 8 || bytes.find("%PDF-") == std::string::npos || bytes.find("%PDF-") > 1024)
    fail("missing %PDF header");
  const std::string_view src(bytes);
  Resolver r;
  const auto headers = find_headers(src);
  std::unordered_map<int, std::size_t> last_header;
  for (const auto& [num, off] : headers) last_header[num] = off;
  auto length_of = [&](const Ref& ref) -> std::optional<std::size_t> {
    const auto it = last_header.find(ref.num);
    if (it == last_header.end()) return std::nullopt;
    try {
      Lexer lx(src, it->second);
      const auto o = lx.parse();
      if (const double* n = o->number()) return static_cast<std::size_t>(*n);
    } catch (const ExtractionError&) {
    }
    return std::nullopt;
  };
  std::size_t consumed = 0;
  for (const auto& [num, off] : headers) {
    if (off < consumed) continue;  // header pattern inside an earlier stream
    std::size_t pos = off;
    try {
      r.objects[num] = parse_indirect(src, pos, length_of);
      consumed = pos;
    } catch (const ExtractionError& e) {
      log::debug(std::string("PDF: skipping object ") + std::to_string(num) + ": " + e.what());
    }
  }
  if (r.objects.empty()) fail("no objects found");

  // Objects packed in object streams.
  std::vector<ObjectPtr> objstms;
  for (const auto& [num, o] : r.objects)
    if (o->stream() && r.name(o->stream()->dict, "Type") == "ObjStm") objstms.push_back(o);
  for (const auto& o : objstms) {
    try {
      const std::string data = r.decode(*o->stream()).bytes;
      const int n = static_cast<int>(r.number(o->stream()->dict, "N", 0));
      const auto first = static_cast<std::size_t>(r.number(o->stream()->dict, "First", 0));
      Lexer head(data);
      std::vector<std::pair<int, std::size_t>> entries;
      for (int i = 0; i < n; ++i) {
        const auto a = head.parse(), b = head.parse();
        if (!a->number() || !b->number()) break;
        entries.emplace_back(static_cast<int>(*a->number()), static_cast<std::size_t>(*b->number()));
      }
      for (const auto& [num, rel] : entries) {
        if (r.objects.count(num)) continue;
        Lexer body(data, first + rel);
        r.objects[num] = body.parse();
      }
    } catch (const ExtractionError& e) {
      log::warn(std::string("PDF: unreadable object stream: ") + e.what());
    }
  }

  // Trailer: classic keyword, else a cross-reference stream, else the catalog.
  ObjectPtr root, encrypt;
  if (const std::size_t t = src.rfind("trailer"); t != std::string_view::npos) {
    try {
      Lexer lx(src, t + 7);
      const auto tr = lx.parse();
      if (tr->dict()) {
        root = r.get(*tr->dict(), "Root");
        encrypt = r.get(*tr->dict(), "Encrypt");
      }
    } catch (const ExtractionError&) {
    }
  }
  for (const auto& [num, o] : r.objects) {
    if (root) break;
    if (o->stream() && r.name(o->stream()->dict, "Type") == "XRef") {
      root = r.get(o->stream()->dict, "Root");
      encrypt = r.get(o->stream()->dict, "Encrypt");
    }
  }
  if (!root) {
    int best = -1;
    for (const auto& [num, o] : r.objects)
      if (o->dict() && !o->stream() && r.name(*o->dict(), "Type") == "Catalog" && num > best) {
        best = num;
        root = o;
      }
  }
  if (encrypt) fail("encrypted documents are not supported");
  if (!root || !root->dict()) fail("no document catalog");

  Document doc;
  std::set<const Object*> visited;
  std::function<void(ObjectPtr, Dict, ObjectPtr, int)> walk = [&](ObjectPtr node, Dict inherited_res,
                                                                   ObjectPtr inherited_box, int depth) {
    node = r.resolve(node);
    if (!node || !node->dict() || depth > 64 || !visited.insert(node.get()).second) return;
    const Dict& d = *node->dict();
    if (const auto res = r.get(d, "Resources"); res && res->dict()) inherited_res = *res->dict();
    if (const auto mb = r.get(d, "MediaBox")) inherited_box = mb;
    const auto kids = r.get(d, "Kids");
    if (r.name(d, "Type") == "Pages" || (kids && kids->array())) {
      if (kids && kids->array())
        for (const auto& k : *kids->array()) walk(k, inherited_res, inherited_box, depth + 1);
      return;
    }
    Page page;
    page.number = static_cast<int>(doc.pages_.size()) + 1;
    page.media_box = rect_from(r, inherited_box);
    std::string content;
    if (const auto c = r.get(d, "Contents")) {
      if (c->stream()) {
        content = r.decode(*c->stream()).bytes;
      } else if (c->array()) {
        for (const auto& part : *c->array()) {
          const auto ps = r.resolve(part);
          if (ps && ps->stream()) content += r.decode(*ps->stream()).bytes + "\n";
        }
      }
    }
    ContentInterpreter(r, page).run(content, inherited_res, Matrix{});
    doc.pages_.push_back(std::move(page));
  };
  walk(r.get(*root->dict(), "Pages"), Dict{}, nullptr, 0);
  return doc;
}

Document Document::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ExtractionError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse(std::move(bytes));
  } catch (const ExtractionError& e) {
    throw ExtractionError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Writer

void Writer::add_page(double width, double height) { pages_.push_back({width, height, {}, {}}); }

void Writer::add_image(const data::GrayImage& image, Rect rect) {
  if (pages_.empty()) add_page();
  auto& p = pages_.back();
  const std::size_t id = images_.size();
  images_.push_back(image);
  p.images.push_back(id);
  std::ostringstream op;
  op << std::fixed << std::setprecision(3) << "q " << rect.width() << " 0 0 " << rect.height() << ' ' << rect.x0 << ' ' << rect.y0 << " cm /Im" << id
     << " Do Q\n";
  p.ops += op.str();
}

void Writer::add_text(const std::string& text, double x, double y, double size) {
  if (pages_.empty()) add_page();
  std::string esc;
  for (char c : text) {
    if (c == '(' || c == ')' || c == '\\') esc.push_back('\\');
    esc.push_back(c);
  }
  std::ostringstream op;
  op << std::fixed << std::setprecision(3) << "BT /F1 " << size << " Tf " << x << ' ' << y << " Td (" << esc << ") Tj ET\n";
  pages_.back().ops += op.str();
}

std::string Writer::finish() const {
  std::string out = "%PDF-1.4\n%\xE2\xE3\xCF\xD3\n";
  std::vector<std::size_t> offsets;
  auto begin_obj = [&]() {
    offsets.push_back(out.size());
    out += std::to_string(offsets.size()) + " 0 obj\n";
  };
  // Numbering: 1 catalog, 2 pages, 3 font, then images, then page + content pairs.
  const std::size_t first_image = 4;
  const std::size_t first_page = first_image + images_.size();
  begin_obj();
  out += "<< /Type /Catalog /Pages 2 0 R >>\nendobj\n";
  begin_obj();
  out += "<< /Type /Pages /Kids [";
  for (std::size_t i = 0; i < pages_.size(); ++i) out += ' ' + std::to_string(first_page + 2 * i) + " 0 R";
  out += " ] /Count " + std::to_string(pages_.size()) + " >>\nendobj\n";
  begin_obj();
  out += "<< /Type /Font /Subtype /Type1 /BaseFont /Helvetica /Encoding /WinAnsiEncoding >>\nendobj\n";
  for (const auto& img : images_) {
    const auto gray = data::to_gray8(img);
    const std::string data = deflate_bytes(std::string(gray.begin(), gray.end()));
    begin_obj();
    out += "<< /Type /XObject /Subtype /Image /Width " + std::to_string(img.width) + " /Height " +
           std::to_string(img.height) + " /ColorSpace /DeviceGray /BitsPerComponent 8 /Filter /FlateDecode /Length " +
           std::to_string(data.size()) + " >>\nstream\n" + data + "\nendstream\nendobj\n";
  }
  for (std::size_t i = 0; i < pages_.size(); ++i) {
    const auto& p = pages_[i];
    std::ostringstream box;
    box << std::fixed << std::setprecision(3) << "[0 0 " << p.width << ' ' << p.height << ']';
    begin_obj();
    out += "<< /Type /Page /Parent 2 0 R /MediaBox " + box.str() + " /Resources << /Font << /F1 3 0 R >>";
    if (!p.images.empty()) {
      out += " /XObject <<";
      for (std::size_t id : p.images) out += " /Im" + std::to_string(id) + ' ' + std::to_string(first_image + id) + " 0 R";
      out += " >>";
    }
    out += " >> /Contents " + std::to_string(first_page + 2 * i + 1) + " 0 R >>\nendobj\n";
    const std::string data = deflate_bytes(p.ops);
    begin_obj();
    out += "<< /Length " + std::to_string(data.size()) + " /Filter /FlateDecode >>\nstream\n" + data +
           "\nendstream\nendobj\n";
  }
  const std::size_t xref = out.size();
  out += "xref\n0 " + std::to_string(offsets.size() + 1) + "\n0000000000 65535 f \n";
  for (std::size_t off : offsets) {
    char line[21];
    std::snprintf(line, sizeof line, "%010zu 00000 n \n", off);
    out += line;
  }
  out += "trailer\n<< /Size " + std::to_string(offsets.size() + 1) + " /Root 1 0 R >>\nstartxref\n" +
         std::to_string(xref) + "\n%%EOF\n";
  return out;
}

void Writer::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  const std::string bytes = finish();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace mammovl::pdf
