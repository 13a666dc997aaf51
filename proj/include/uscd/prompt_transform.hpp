#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace uscd {

enum class Language { kPython, kOther };

Language parse_language(std::string_view tag);
std::string_view to_string(Language lang);

/// Half-open byte range [begin, end) into a prompt's text.
struct ByteSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool operator==(const ByteSpan&) const = default;
};

enum class ExampleKind { kDoctestCall, kDoctestOutput, kAppendedAssert };

/// One structurally marked input-output example region. Spans cover whole
/// lines including the trailing newline. A call or output sharing its line
/// with the closing docstring quotes runs from its first non-blank byte to
/// the quotes instead.
struct ExampleSpan {
  ByteSpan bytes;
  ExampleKind kind;

  bool operator==(const ExampleSpan&) const = default;
};

/// A code-generation prompt with its structure located.
struct StandardPrompt {
  std::string raw_text;
  Language language = Language::kPython;
  ByteSpan signature;    // the `def` line(s) preceding the docstring; may be empty
  ByteSpan description;  // natural-language text before the first example
  std::vector<ExampleSpan> examples;
  // Region where blank-line runs are collapsed after removal: from the end
  // of the description to the end of the docstring (or of the text).
  ByteSpan tail;

  std::string_view signature_text() const;
  std::string_view description_text() const;

  /// Number of examples: each doctest call (with its output) or assert.
  std::size_t example_count() const;
};

/// Prompt with all examples removed, plus what was removed.
struct LamePrompt {
  std::string raw_text;
  std::string source_id;
  std::vector<ExampleSpan> removed;
};

/// Locates the signature, description and example spans. When the text
/// holds several docstrings the last one is the target's.
///
/// A doctest call is any line whose first non-blank characters are ">>>"
/// (for non-Python prompts a line comment marker may precede it). The
/// non-blank lines after a call, up to the next call, a blank line or the
/// docstring end, are its output. Trailing `assert` lines are appended
/// asserts. An unterminated docstring is a ParseError at its opening quote.
StandardPrompt parse_prompt(std::string raw, Language language);

/// Removes every example span together with its newline, then collapses runs
/// of blank lines in the region after the description to a single line.
/// Prompts without examples come back byte-identical.
LamePrompt strip_examples(const StandardPrompt& prompt, std::string source_id = {});

/// Keeps the first `keep` examples and removes the rest the same way.
/// Throws OutOfRange when `keep` exceeds the example count.
StandardPrompt strip_partial(const StandardPrompt& prompt, std::size_t keep);

}  // namespace uscd
