#include "uscd/prompt_transform.hpp"

#include <algorithm>
#include <array>
#include <optional>

#include "uscd/error.hpp"

namespace uscd {

namespace {

struct Line {
  std::size_t begin;
  std::size_t content_end;  // excludes the newline
  std::size_t end;          // includes the newline when present
};

// What a language's examples look like. Python is the only mandatory entry.
struct LanguagePatterns {
  std::vector<std::string_view> comment_prefixes;  // may precede ">>>"
  bool has_docstrings;
  bool has_asserts;
};

const LanguagePatterns& patterns_for(Language lang) {
  static const LanguagePatterns python{{}, true, true};
  static const LanguagePatterns other{{"//", "/*", "#", "--", ";", "*"}, false, false};
  return lang == Language::kPython ? python : other;
}

std::vector<Line> split_lines(std::string_view text) {
  std::vector<Line> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) {
      lines.push_back({pos, text.size(), text.size()});
      break;
    }
    lines.push_back({pos, nl, nl + 1});
    pos = nl + 1;
  }
  return lines;
}

bool is_blank(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; }

std::string_view content(std::string_view text, const Line& line) {
  return text.substr(line.begin, line.content_end - line.begin);
}

std::string_view ltrim(std::string_view s) {
  while (!s.empty() && is_blank(s.front())) s.remove_prefix(1);
  return s;
}

bool blank_line(std::string_view text, const Line& line) {
  return ltrim(content(text, line)).empty();
}

// Strips one leading comment marker when the language has them.
std::string_view uncomment(std::string_view s, const LanguagePatterns& pat, bool* had_marker) {
  s = ltrim(s);
  *had_marker = false;
  for (std::string_view prefix : pat.comment_prefixes) {
    if (s.substr(0, prefix.size()) == prefix) {
      *had_marker = true;
      return ltrim(s.substr(prefix.size()));
    }
  }
  return s;
}

std::size_t indent_end(std::string_view text, const Line& line) {
  std::size_t pos = line.begin;
  while (pos < line.content_end && is_blank(text[pos])) ++pos;
  return pos;
}

bool is_call_line(std::string_view text, const Line& line, const LanguagePatterns& pat) {
  bool marker = false;
  return uncomment(content(text, line), pat, &marker).substr(0, 3) == ">>>";
}

bool is_assert_line(std::string_view text, const Line& line) {
  std::string_view s = ltrim(content(text, line));
  if (s.substr(0, 6) != "assert") return false;
  return s.size() == 6 || s[6] == ' ' || s[6] == '(' || s[6] == '\t';
}

bool is_def_line(std::string_view text, const Line& line) {
  std::string_view s = ltrim(content(text, line));
  return s.substr(0, 4) == "def " || s.substr(0, 10) == "async def ";
}

struct Docstring {
  std::size_t open;       // offset of the opening quotes
  std::size_t body;       // first byte after them
  std::size_t close;      // offset of the closing quotes
};

// The last docstring in the text; earlier ones belong to helper functions.
std::optional<Docstring> find_docstring(std::string_view text) {
  std::optional<Docstring> found;
  std::size_t pos = 0;
  while (true) {
    std::size_t open = std::min(text.find("\"\"\"", pos), text.find("'''", pos));
    if (open == std::string_view::npos) return found;
    std::string_view delim = text.substr(open, 3);
    std::size_t close = text.find(delim, open + 3);
    if (close == std::string_view::npos) throw ParseError("unterminated docstring", open);
    found = Docstring{open, open + 3, close};
    pos = close + 3;
  }
}

std::size_t line_index_at(const std::vector<Line>& lines, std::size_t offset) {
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (offset < lines[i].end || i + 1 == lines.size()) return i;
  }
  return 0;
}

// Moves `pos` (a line start) back over whitespace-only lines, not past `floor`.
std::size_t trim_blank_lines_back(std::string_view text, const std::vector<Line>& lines,
                                  std::size_t pos, std::size_t floor) {
  while (pos > floor) {
    std::size_t idx = line_index_at(lines, pos - 1);
    if (lines[idx].begin < floor || !blank_line(text, lines[idx])) break;
    pos = lines[idx].begin;
  }
  return pos;
}

// Removes the given spans, then collapses blank-line runs inside `tail`.
std::string remove_spans(std::string_view text, std::vector<ExampleSpan> spans, ByteSpan tail) {
  if (spans.empty()) return std::string(text);
  std::sort(spans.begin(), spans.end(),
            [](const ExampleSpan& a, const ExampleSpan& b) { return a.bytes.begin < b.bytes.begin; });

  std::string out;
  out.reserve(text.size());
  std::size_t cursor = 0;
  std::size_t removed_before_tail_begin = 0;
  std::size_t removed_before_tail_end = 0;
  for (const ExampleSpan& s : spans) {
    out.append(text.substr(cursor, s.bytes.begin - cursor));
    if (s.bytes.end <= tail.begin) removed_before_tail_begin += s.bytes.size();
    if (s.bytes.end <= tail.end) removed_before_tail_end += s.bytes.size();
    cursor = s.bytes.end;
  }
  out.append(text.substr(cursor));

  const std::size_t region_begin = tail.begin - removed_before_tail_begin;
  const std::size_t region_end = tail.end - removed_before_tail_end;
  std::string collapsed = out.substr(0, region_begin);
  std::vector<Line> lines = split_lines(out);
  // A blank run is written as one blank line, and only when more text
  // follows inside the region.
  bool pending_blank = false;
  std::size_t blank_begin = 0;
  std::size_t copied_to = region_begin;
  for (const Line& line : lines) {
    if (line.begin < region_begin) {
      // The region may open mid-line, right at a docstring's closing quotes.
      if (line.end > region_begin) {
        collapsed.append(out, region_begin, line.end - region_begin);
        copied_to = line.end;
      }
      continue;
    }
    if (line.end > region_end) break;
    bool blank = blank_line(out, line) && line.end != line.content_end;
    if (blank) {
      if (!pending_blank) blank_begin = line.begin;
      pending_blank = true;
    } else {
      if (pending_blank) {
        const Line& first = lines[line_index_at(lines, blank_begin)];
        collapsed.append(out, first.begin, first.end - first.begin);
        pending_blank = false;
      }
      collapsed.append(out, line.begin, line.end - line.begin);
    }
    copied_to = line.end;
  }
  collapsed.append(out, copied_to, std::string::npos);
  return collapsed;
}

// Groups spans into examples: a call plus its output, or a single assert.
std::vector<std::vector<ExampleSpan>> group_examples(const std::vector<ExampleSpan>& spans) {
  std::vector<std::vector<ExampleSpan>> groups;
  for (const ExampleSpan& s : spans) {
    if (s.kind == ExampleKind::kDoctestOutput && !groups.empty()) {
      groups.back().push_back(s);
    } else {
      groups.push_back({s});
    }
  }
  return groups;
}

}  // namespace

Language parse_language(std::string_view tag) {
  if (tag == "python" || tag == "py" || tag.empty()) return Language::kPython;
  return Language::kOther;
}

std::string_view to_string(Language lang) {
  return lang == Language::kPython ? "python" : "other";
}

std::string_view StandardPrompt::signature_text() const {
  return std::string_view(raw_text).substr(signature.begin, signature.size());
}

std::string_view StandardPrompt::description_text() const {
  return std::string_view(raw_text).substr(description.begin, description.size());
}

std::size_t StandardPrompt::example_count() const { return group_examples(examples).size(); }

StandardPrompt parse_prompt(std::string raw, Language language) {
  if (raw.empty()) throw ParseError("empty prompt", 0);
  const LanguagePatterns& pat = patterns_for(language);
  const std::string_view text = raw;
  const std::vector<Line> lines = split_lines(text);

  std::optional<Docstring> doc;
  if (pat.has_docstrings) doc = find_docstring(text);

  // Lines [first_line, last_line) may hold examples. With a docstring the
  // region runs from its opening line to the end of the text, so asserts
  // placed after the closing quotes are still found.
  std::size_t first_line = 0;
  std::size_t close_line = lines.size();
  if (doc) {
    first_line = line_index_at(lines, doc->body);
    if (lines[first_line].begin < doc->body) ++first_line;
    close_line = line_index_at(lines, doc->close);
  }

  auto closes_on = [&](std::size_t i) { return doc && i == close_line; };
  auto closer_leads = [&](std::size_t i) {
    return closes_on(i) && ltrim(content(text, lines[i])).substr(0, 3) == text.substr(doc->close, 3);
  };

  std::vector<ExampleSpan> spans;
  std::vector<bool> is_example(lines.size(), false);
  for (std::size_t i = first_line; i < lines.size(); ++i) {
    if (closer_leads(i)) continue;
    if (!is_call_line(text, lines[i], pat)) continue;
    if (closes_on(i)) {
      spans.push_back({{indent_end(text, lines[i]), doc->close}, ExampleKind::kDoctestCall});
      is_example[i] = true;
      continue;
    }
    spans.push_back({{lines[i].begin, lines[i].end}, ExampleKind::kDoctestCall});
    is_example[i] = true;

    std::size_t j = i + 1;
    std::optional<ByteSpan> output;
    for (; j < lines.size(); ++j) {
      if (closer_leads(j) || blank_line(text, lines[j]) || is_call_line(text, lines[j], pat)) break;
      if (!pat.comment_prefixes.empty()) {
        if (ltrim(content(text, lines[j])).substr(0, 2) == "*/") break;
        bool marker = false;
        std::string_view rest = uncomment(content(text, lines[j]), pat, &marker);
        if (!marker || rest.empty()) break;
      }
      if (closes_on(j)) {
        ByteSpan tail_piece{output ? lines[j].begin : indent_end(text, lines[j]), doc->close};
        output = output ? ByteSpan{output->begin, tail_piece.end} : tail_piece;
        is_example[j] = true;
        ++j;
        break;
      }
      output = output ? ByteSpan{output->begin, lines[j].end} : ByteSpan{lines[j].begin, lines[j].end};
      is_example[j] = true;
    }
    if (output) spans.push_back({*output, ExampleKind::kDoctestOutput});
    i = j - 1;
  }

  if (pat.has_asserts) {
    // Accept an assert only if nothing but blank lines, examples, asserts
    // and the closing quotes follow it within its region.
    auto region_end = [&](std::size_t i) {
      return doc && i < close_line ? close_line : lines.size();
    };
    std::vector<std::size_t> accepted;
    for (std::size_t i = first_line; i < lines.size(); ++i) {
      if (is_example[i] || closes_on(i) || !is_assert_line(text, lines[i])) continue;
      bool trailing = true;
      for (std::size_t j = i + 1; j < region_end(i) && trailing; ++j) {
        trailing = blank_line(text, lines[j]) || is_example[j] || is_assert_line(text, lines[j]);
      }
      if (trailing) accepted.push_back(i);
    }
    for (std::size_t i : accepted) {
      spans.push_back({{lines[i].begin, lines[i].end}, ExampleKind::kAppendedAssert});
      is_example[i] = true;
    }
    std::sort(spans.begin(), spans.end(), [](const ExampleSpan& a, const ExampleSpan& b) {
      return a.bytes.begin < b.bytes.begin;
    });
  }

  StandardPrompt prompt;
  prompt.language = language;

  // Signature: the def line(s) right before the docstring (Python), or the
  // last code line after the comment block (other languages).
  std::size_t desc_begin = 0;
  if (doc) {
    std::size_t open_line = line_index_at(lines, doc->open);
    std::optional<std::size_t> def_line;
    for (std::size_t i = 0; i <= open_line && i < lines.size(); ++i) {
      if (is_def_line(text, lines[i])) def_line = i;
    }
    if (def_line) {
      std::size_t sig_end = *def_line == open_line ? doc->open : lines[open_line].begin;
      prompt.signature = {lines[*def_line].begin, sig_end};
    }
    desc_begin = doc->body;
  } else if (language == Language::kPython) {
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (is_example[i]) break;
      if (is_def_line(text, lines[i])) {
        prompt.signature = {lines[i].begin, lines[i].end};
        desc_begin = lines[i].end;
        break;
      }
    }
  }

  // The description ends at the first example, the docstring end, or (for
  // comment-documented languages) the first code line, whichever is first.
  std::size_t boundary = text.size();
  if (!spans.empty()) {
    boundary = lines[line_index_at(lines, spans.front().bytes.begin)].begin;
  }
  if (doc) {
    boundary = std::min(boundary, closer_leads(close_line) ? lines[close_line].begin : doc->close);
  }
  if (language == Language::kOther) {
    for (const Line& line : lines) {
      if (line.begin >= boundary) break;
      if (blank_line(text, line)) continue;
      bool marker = false;
      uncomment(content(text, line), pat, &marker);
      if (!marker || ltrim(content(text, line)).substr(0, 2) == "*/") {
        boundary = line.begin;
        break;
      }
    }
  }
  boundary = std::max(boundary, desc_begin);
  std::size_t desc_end = trim_blank_lines_back(text, lines, boundary, desc_begin);

  if (language == Language::kOther) {
    // Last non-comment, non-blank line after the description.
    for (std::size_t i = lines.size(); i-- > 0;) {
      if (lines[i].begin < desc_end) break;
      bool marker = false;
      uncomment(content(text, lines[i]), patterns_for(language), &marker);
      if (!marker && !blank_line(text, lines[i]) && !is_example[i]) {
        prompt.signature = {lines[i].begin, lines[i].end};
        break;
      }
    }
  }
  prompt.description = {desc_begin, desc_end};

  std::size_t tail_end = doc ? (closer_leads(close_line) ? lines[close_line].begin : doc->close)
                             : text.size();
  if (!prompt.signature.empty() && prompt.signature.begin >= desc_end) {
    tail_end = std::min(tail_end, prompt.signature.begin);
  }
  for (const ExampleSpan& s : spans) tail_end = std::max(tail_end, s.bytes.end);
  prompt.tail = {desc_end, std::max(desc_end, tail_end)};

  prompt.examples = std::move(spans);
  prompt.raw_text = std::move(raw);
  return prompt;
}

LamePrompt strip_examples(const StandardPrompt& prompt, std::string source_id) {
  LamePrompt lame;
  lame.raw_text = remove_spans(prompt.raw_text, prompt.examples, prompt.tail);
  lame.source_id = std::move(source_id);
  lame.removed = prompt.examples;
  return lame;
}

StandardPrompt strip_partial(const StandardPrompt& prompt, std::size_t keep) {
  auto groups = group_examples(prompt.examples);
  if (keep > groups.size()) {
    throw OutOfRange("cannot keep " + std::to_string(keep) + " examples of " +
                     std::to_string(groups.size()));
  }
  std::vector<ExampleSpan> drop;
  for (std::size_t g = keep; g < groups.size(); ++g) {
    drop.insert(drop.end(), groups[g].begin(), groups[g].end());
  }
  return parse_prompt(remove_spans(prompt.raw_text, drop, prompt.tail), prompt.language);
}

}  // namespace uscd
