//! Paired image/caption corpora: tokenization, vocabulary, file formats and a
//! synthetic corpus generator for desk-scale experiments.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Captions are truncated to this many tokens.
pub const MAX_TOKENS: usize = 30;
pub const UNK: &str = "<UNK>";
pub const UNK_ID: u32 = 0;
pub const DEFAULT_MIN_COUNT: usize = 5;

const EMBEDDINGS_MAGIC: &[u8; 4] = b"MCIC";
const EMBEDDINGS_VERSION: u16 = 1;

/// Lowercase, replace everything outside `[a-zA-Z]` by a space, split on
/// whitespace and keep the first [`MAX_TOKENS`] tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_ascii_alphabetic() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .take(MAX_TOKENS)
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_count: usize,
}

impl Vocabulary {
    /// Keeps every token seen at least `min_count` times. Ids are assigned by
    /// descending count, ties broken lexicographically; id 0 is `<UNK>`.
    pub fn build<I, S>(captions: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for caption in captions {
            for tok in caption.as_ref() {
                *counts.entry(tok.clone()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_count && tok != UNK)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = Vec::with_capacity(kept.len() + 1);
        tokens.push(UNK.to_owned());
        tokens.extend(kept.into_iter().map(|(tok, _)| tok));
        Self::from_tokens(tokens, min_count)
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            index,
            min_count,
        }
    }

    /// Number of ids, including `<UNK>`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK).to_owned())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for tok in &self.tokens {
            writeln!(out, "{tok}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a vocabulary file. The count threshold is not part of the file
    /// format, so the returned vocabulary reports `min_count` as given.
    pub fn read(path: impl AsRef<Path>, min_count: usize) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let ok = if lineno == 0 {
                line == UNK
            } else {
                !line.is_empty() && line.chars().all(|c| c.is_ascii_lowercase())
            };
            if !ok {
                return Err(Error::Malformed {
                    path: path.to_owned(),
                    record: lineno as u64,
                    reason: format!("unexpected vocabulary entry {line:?}"),
                });
            }
            tokens.push(line);
        }
        if tokens.is_empty() {
            return Err(Error::Malformed {
                path: path.to_owned(),
                record: 0,
                reason: "missing <UNK> line".into(),
            });
        }
        let vocab = Self::from_tokens(tokens, min_count);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::BadFormat {
                format: "vocabulary",
                reason: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }
}

pub fn build_vocabulary<S: AsRef<[String]>>(captions: &[S], min_count: usize) -> Vocabulary {
    Vocabulary::build(captions, min_count)
}

pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(tokens)
}

/// A caption as stored in the captions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCaption {
    pub caption_id: String,
    pub image_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub image_id: String,
    pub raw_text: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub embedding: Vec<f32>,
}

/// Images joined with their ground-truth captions. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCorpus {
    images: Vec<ImageRecord>,
    captions: Vec<CaptionRecord>,
    words: Vec<Vec<String>>,
    vocab: Vocabulary,
    image_index: HashMap<String, usize>,
    caption_index: HashMap<String, usize>,
    captions_of_image: Vec<Vec<usize>>,
    caption_image: Vec<usize>,
}

impl PairedCorpus {
    /// Joins images and captions, builds the vocabulary over the captions
    /// and encodes them.
    pub fn new(
        images: Vec<ImageRecord>,
        captions: Vec<RawCaption>,
        min_count: usize,
    ) -> Result<Self> {
        let mut image_index = HashMap::with_capacity(images.len());
        let dim = images.first().map(|im| im.embedding.len());
        for (i, im) in images.iter().enumerate() {
            if image_index.insert(im.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "image",
                    id: im.image_id.clone(),
                });
            }
            if Some(im.embedding.len()) != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim.unwrap_or(0),
                    found: im.embedding.len(),
                });
            }
            if im.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "image '{}' has a non-finite embedding value",
                    im.image_id
                )));
            }
        }

        let mut caption_index = HashMap::with_capacity(captions.len());
        let mut captions_of_image = vec![Vec::new(); images.len()];
        let mut caption_image = Vec::with_capacity(captions.len());
        for (c, cap) in captions.iter().enumerate() {
            let Some(&img) = image_index.get(&cap.image_id) else {
                return Err(Error::UnknownImage {
                    caption_id: cap.caption_id.clone(),
                    image_id: cap.image_id.clone(),
                });
            };
            if caption_index.insert(cap.caption_id.clone(), c).is_some() {
                return Err(Error::DuplicateId {
                    kind: "caption",
                    id: cap.caption_id.clone(),
                });
            }
            captions_of_image[img].push(c);
            caption_image.push(img);
        }
        if let Some(i) = captions_of_image.iter().position(Vec::is_empty) {
            return Err(Error::ImageWithoutCaptions(images[i].image_id.clone()));
        }

        let words: Vec<Vec<String>> = captions.iter().map(|c| tokenize(&c.text)).collect();
        let vocab = Vocabulary::build(&words, min_count);
        let captions = captions
            .into_iter()
            .zip(&words)
            .map(|(raw, w)| CaptionRecord {
                tokens: vocab.encode(w),
                caption_id: raw.caption_id,
                image_id: raw.image_id,
                raw_text: raw.text,
            })
            .collect();

        Ok(PairedCorpus {
            images,
            captions,
            words,
            vocab,
            image_index,
            caption_index,
            captions_of_image,
            caption_image,
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn captions(&self) -> &[CaptionRecord] {
        &self.captions
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Embedding dimension shared by all images.
    pub fn image_dim(&self) -> usize {
        self.images.first().map_or(0, |im| im.embedding.len())
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.image_index.get(image_id).map(|&i| &self.images[i])
    }

    pub fn image_position(&self, image_id: &str) -> Option<usize> {
        self.image_index.get(image_id).copied()
    }

    pub fn caption(&self, caption_id: &str) -> Option<&CaptionRecord> {
        self.caption_index
            .get(caption_id)
            .map(|&i| &self.captions[i])
    }

    pub fn caption_position(&self, caption_id: &str) -> Option<usize> {
        self.caption_index.get(caption_id).copied()
    }

    /// Tokenized surface words of a caption (before `<UNK>` substitution).
    pub fn words(&self, caption_pos: usize) -> &[String] {
        &self.words[caption_pos]
    }

    /// Position of the image owning the caption at `caption_pos`.
    pub fn image_of(&self, caption_pos: usize) -> usize {
        self.caption_image[caption_pos]
    }

    /// Caption positions belonging to the image at `image_pos`.
    pub fn captions_of(&self, image_pos: usize) -> &[usize] {
        &self.captions_of_image[image_pos]
    }

    pub fn raw_captions(&self) -> Vec<RawCaption> {
        self.captions
            .iter()
            .map(|c| RawCaption {
                caption_id: c.caption_id.clone(),
                image_id: c.image_id.clone(),
                text: c.raw_text.clone(),
            })
            .collect()
    }
}

pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<RawCaption>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawCaption = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_owned(),
            record: lineno as u64 + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_captions(path: impl AsRef<Path>, captions: &[RawCaption]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for c in captions {
        serde_json::to_writer(&mut out, c).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let mut reader = BufReader::new(File::open(path)?);
    let malformed = |record: u64, reason: String| Error::Malformed {
        path: path.to_owned(),
        record,
        reason,
    };

    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|e| malformed(0, format!("header: {e}")))?;
    if &magic != EMBEDDINGS_MAGIC {
        return Err(malformed(0, format!("bad magic {magic:?}")));
    }
    let header = (|| -> std::io::Result<(u16, u32, u64)> {
        Ok((
            reader.read_u16::<LittleEndian>()?,
            reader.read_u32::<LittleEndian>()?,
            reader.read_u64::<LittleEndian>()?,
        ))
    })()
    .map_err(|e| malformed(0, format!("header: {e}")))?;
    let (version, dim, count) = header;
    if version != EMBEDDINGS_VERSION {
        return Err(malformed(0, format!("unsupported version {version}")));
    }
    let dim = dim as usize;

    let mut images = Vec::with_capacity(count.min(1 << 20) as usize);
    for ordinal in 1..=count {
        let rec = (|| -> std::io::Result<ImageRecord> {
            let len = reader.read_u16::<LittleEndian>()? as usize;
            let mut id = vec![0u8; len];
            reader.read_exact(&mut id)?;
            let image_id = String::from_utf8(id)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            let mut embedding = vec![0f32; dim];
            reader.read_f32_into::<LittleEndian>(&mut embedding)?;
            Ok(ImageRecord {
                image_id,
                embedding,
            })
        })()
        .map_err(|e| malformed(ordinal, e.to_string()))?;
        if rec.embedding.iter().any(|v| !v.is_finite()) {
            return Err(malformed(ordinal, "non-finite embedding value".into()));
        }
        images.push(rec);
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(malformed(
            count + 1,
            "trailing bytes after last record".into(),
        ));
    }
    Ok(images)
}

pub fn write_embeddings(path: impl AsRef<Path>, images: &[ImageRecord]) -> Result<()> {
    let dim = images.first().map_or(0, |im| im.embedding.len());
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(EMBEDDINGS_MAGIC)?;
    out.write_u16::<LittleEndian>(EMBEDDINGS_VERSION)?;
    out.write_u32::<LittleEndian>(dim as u32)?;
    out.write_u64::<LittleEndian>(images.len() as u64)?;
    for im in images {
        if im.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: im.embedding.len(),
            });
        }
        let id = im.image_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::invalid(format!("image id too long: {}", im.image_id)))?;
        out.write_u16::<LittleEndian>(len)?;
        out.write_all(id)?;
        for &v in &im.embedding {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_paired_corpus(
    captions_path: impl AsRef<Path>,
    embeddings_path: impl AsRef<Path>,
) -> Result<PairedCorpus> {
    load_paired_corpus_with(captions_path, embeddings_path, DEFAULT_MIN_COUNT)
}

pub fn load_paired_corpus_with(
    captions_path: impl AsRef<Path>,
    embeddings_path: impl AsRef<Path>,
    min_count: usize,
) -> Result<PairedCorpus> {
    let (cp, ep) = (captions_path.as_ref(), embeddings_path.as_ref());
    let (captions, images) = rayon::join(|| read_captions(cp), || read_embeddings(ep));
    PairedCorpus::new(images?, captions?, min_count)
}

pub fn write_paired_corpus(
    corpus: &PairedCorpus,
    captions_path: impl AsRef<Path>,
    embeddings_path: impl AsRef<Path>,
) -> Result<()> {
    write_captions(captions_path, &corpus.raw_captions())?;
    write_embeddings(embeddings_path, corpus.images())
}

/// Standard deviation of the Gaussian noise added to synthetic image embeddings.
pub const SYNTH_NOISE_SIGMA: f64 = 0.1;

const FUNCTION_WORDS: [&str; 8] = ["a", "the", "on", "with", "in", "of", "and", "near"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const TOPIC_SIZE: usize = 12;
const PERSONAL_WORDS: usize = 4;

/// Surface form of the `i`-th content word of the synthetic lexicon.
fn content_word(mut i: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut s = String::new();
    for _ in 0..3 {
        let syl = i % base;
        s.push(CONSONANTS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
        i /= base;
    }
    s
}

/// The generator's lexicon: function words first, then content words.
pub fn synthetic_lexicon(vocab_size: usize) -> Vec<String> {
    let mut words: Vec<String> = FUNCTION_WORDS.iter().map(|w| (*w).to_owned()).collect();
    words.extend((0..vocab_size.saturating_sub(FUNCTION_WORDS.len())).map(content_word));
    words.truncate(vocab_size);
    words
}

/// Builds a corpus whose image embeddings are a fixed random linear map of
/// the mean word-count vector of the image's captions, plus Gaussian noise.
///
/// Each image draws a topic (a block of content words) and a small set of
/// personal words from it; its captions mostly repeat those personal words,
/// so captions of the same image resemble each other and captions of images
/// sharing a topic make plausible decoys.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_images: usize,
    captions_per_image: usize,
    vocab_size: usize,
    d_img: usize,
) -> Result<PairedCorpus> {
    if n_images < 1 {
        return Err(Error::invalid("n_images must be >= 1"));
    }
    if captions_per_image < 2 {
        return Err(Error::invalid("captions_per_image must be >= 2"));
    }
    let min_vocab = FUNCTION_WORDS.len() + PERSONAL_WORDS + 1;
    if vocab_size < min_vocab {
        return Err(Error::invalid(format!("vocab_size must be >= {min_vocab}")));
    }
    if d_img < 1 {
        return Err(Error::invalid("d_img must be >= 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = synthetic_lexicon(vocab_size);
    let n_func = FUNCTION_WORDS.len();
    let n_content = vocab_size - n_func;
    let n_topics = (n_content / TOPIC_SIZE).max(1);
    let topic_len = n_content / n_topics;

    let gauss = Normal::new(0.0f64, 1.0).expect("valid normal");
    let map: Vec<f64> = (0..d_img * vocab_size)
        .map(|_| gauss.sample(&mut rng))
        .collect();
    let noise = Normal::new(0.0f64, SYNTH_NOISE_SIGMA).expect("valid normal");

    let width = n_images.to_string().len();
    let mut images = Vec::with_capacity(n_images);
    let mut captions = Vec::with_capacity(n_images * captions_per_image);
    for img in 0..n_images {
        let topic = rng.random_range(0..n_topics);
        let block: Vec<usize> = (0..topic_len)
            .map(|k| n_func + topic * topic_len + k)
            .collect();
        let mut personal: Vec<usize> = block
            .choose_multiple(&mut rng, PERSONAL_WORDS.min(block.len()))
            .copied()
            .collect();
        personal.push(n_func + rng.random_range(0..n_content));

        let image_id = format!("img{img:0width$}");
        let mut counts = vec![0f64; vocab_size];
        for cap in 0..captions_per_image {
            let len = rng.random_range(5..=10);
            let mut text = Vec::with_capacity(len);
            for _ in 0..len {
                let roll: f64 = rng.random();
                let w = if roll < 0.25 {
                    rng.random_range(0..n_func)
                } else if roll < 0.9 {
                    personal[rng.random_range(0..personal.len())]
                } else {
                    block[rng.random_range(0..block.len())]
                };
                counts[w] += 1.0;
                text.push(lexicon[w].as_str());
            }
            captions.push(RawCaption {
                caption_id: format!("{image_id}-c{cap}"),
                image_id: image_id.clone(),
                text: text.join(" "),
            });
        }
        for c in &mut counts {
            *c /= captions_per_image as f64;
        }
        let embedding = (0..d_img)
            .map(|r| {
                let row = &map[r * vocab_size..(r + 1) * vocab_size];
                let clean: f64 = row.iter().zip(&counts).map(|(m, c)| m * c).sum();
                (clean + noise.sample(&mut rng)) as f32
            })
            .collect();
        images.push(ImageRecord {
            image_id,
            embedding,
        });
    }

    PairedCorpus::new(images, captions, DEFAULT_MIN_COUNT)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| (*t).to_owned()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Two dogs, RUNNING!"),
            toks(&["two", "dogs", "running"])
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("it's 5pm"), toks(&["it", "s", "pm"]));
        assert_eq!(tokenize("café"), toks(&["caf"]));
    }

    #[test]
    fn tokenize_truncates_to_thirty() {
        let words: Vec<String> = (0..35).map(|i| content_word(i)).collect();
        let out = tokenize(&words.join(" "));
        assert_eq!(out.len(), 30);
        assert_eq!(out[..], words[..30]);
    }

    #[test]
    fn vocabulary_min_count_boundary() {
        let mut caps = vec![toks(&["cat"]); 5];
        caps.extend(vec![toks(&["lynx"]); 4]);
        let v = Vocabulary::build(&caps, 5);
        assert!(v.id("cat").is_some());
        assert_eq!(v.id("lynx"), None);
        assert_eq!(v.encode(&["lynx"]), vec![UNK_ID]);
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn vocabulary_order_count_then_lexicographic() {
        let caps = vec![toks(&["b", "a", "c", "c"]), toks(&["a", "b", "c"])];
        let v = Vocabulary::build(&caps, 1);
        assert_eq!(v.tokens(), &toks(&[UNK, "c", "a", "b"])[..]);
    }

    #[test]
    fn encode_and_decode() {
        let caps = vec![toks(&["a", "dog"]); 5];
        let v = Vocabulary::build(&caps, 5);
        let ids = encode(&toks(&["a", "dog"]), &v);
        assert_eq!(ids, vec![v.id("a").unwrap(), v.id("dog").unwrap()]);
        assert_eq!(v.decode(&ids), toks(&["a", "dog"]));
        assert_eq!(
            encode(&toks(&["a", "lynx"]), &v),
            vec![v.id("a").unwrap(), UNK_ID]
        );
    }

    fn fixture() -> (Vec<ImageRecord>, Vec<RawCaption>) {
        let images = (0..3)
            .map(|i| ImageRecord {
                image_id: format!("im{i}"),
                embedding: vec![i as f32, 1.5, -2.0],
            })
            .collect();
        let captions = (0..6)
            .map(|c| RawCaption {
                caption_id: format!("c{c}"),
                image_id: format!("im{}", c / 2),
                text: format!("A picture number {c}, of a dog!"),
            })
            .collect();
        (images, captions)
    }

    #[test]
    fn corpus_joins_fixture() {
        let (images, captions) = fixture();
        let corpus = PairedCorpus::new(images, captions, 1).unwrap();
        assert_eq!(corpus.images().len(), 3);
        assert_eq!(corpus.captions().len(), 6);
        assert_eq!(corpus.captions_of(1), &[2, 3]);
        assert_eq!(corpus.image_of(5), 2);
    }

    #[test]
    fn missing_image_is_rejected() {
        let (images, mut captions) = fixture();
        captions[3].image_id = "nope".into();
        match PairedCorpus::new(images, captions, 1) {
            Err(Error::UnknownImage { caption_id, .. }) => assert_eq!(caption_id, "c3"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (mut images, captions) = fixture();
        images[2].embedding.push(0.0);
        assert!(matches!(
            PairedCorpus::new(images, captions, 1),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 4
            })
        ));
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let (images, mut captions) = fixture();
        captions[0].text = "Ünïcode \"quoted\" text\twith tab".into();
        let corpus = PairedCorpus::new(images, captions, 1).unwrap();
        let cp = dir.path().join("caps.jsonl");
        let ep = dir.path().join("emb.bin");
        write_paired_corpus(&corpus, &cp, &ep).unwrap();
        let loaded = load_paired_corpus_with(&cp, &ep, 1).unwrap();
        assert_eq!(loaded, corpus);

        // byte-exact text round trip
        let cp2 = dir.path().join("caps2.jsonl");
        let ep2 = dir.path().join("emb2.bin");
        write_paired_corpus(&loaded, &cp2, &ep2).unwrap();
        assert_eq!(std::fs::read(&cp).unwrap(), std::fs::read(&cp2).unwrap());
        assert_eq!(std::fs::read(&ep).unwrap(), std::fs::read(&ep2).unwrap());
    }

    #[test]
    fn malformed_caption_line_reports_ordinal() {
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("caps.jsonl");
        std::fs::write(
            &cp,
            "{\"caption_id\":\"a\",\"image_id\":\"i\",\"text\":\"x\"}\n{\"caption_id\": 3}\n",
        )
        .unwrap();
        match read_captions(&cp) {
            Err(Error::Malformed { record, path, .. }) => {
                assert_eq!(record, 2);
                assert_eq!(path, cp);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_embedding_record_reports_ordinal() {
        let dir = tempfile::tempdir().unwrap();
        let ep = dir.path().join("emb.bin");
        let (images, _) = fixture();
        write_embeddings(&ep, &images).unwrap();
        let bytes = std::fs::read(&ep).unwrap();
        std::fs::write(&ep, &bytes[..bytes.len() - 2]).unwrap();
        match read_embeddings(&ep) {
            Err(Error::Malformed { record, .. }) => assert_eq!(record, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = generate_synthetic_corpus(1, 10, 5, 60, 16).unwrap();
        let b = generate_synthetic_corpus(1, 10, 5, 60, 16).unwrap();
        let c = generate_synthetic_corpus(2, 10, 5, 60, 16).unwrap();
        assert_eq!(a.captions().len(), 50);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_corpus_validates_sizes() {
        assert!(generate_synthetic_corpus(1, 0, 5, 60, 16).is_err());
        assert!(generate_synthetic_corpus(1, 3, 1, 60, 16).is_err());
        assert!(generate_synthetic_corpus(1, 3, 2, 5, 16).is_err());
    }

    #[test]
    fn lexicon_is_alphabetic_and_unique() {
        let lex = synthetic_lexicon(500);
        let uniq: std::collections::HashSet<_> = lex.iter().collect();
        assert_eq!(uniq.len(), 500);
        for w in &lex {
            assert_eq!(tokenize(w), vec![w.clone()]);
        }
    }
}
