"""Builds the toy fixture under data/toy from hand-written sources.

Pronunciations are copied from the CMU Pronouncing Dictionary (via the
`cmudict` Python package); embeddings are synthetic topic vectors.
"""
import json, random, sys, os
import cmudict

SRC = os.path.dirname(os.path.abspath(__file__))
OUT = sys.argv[1] if len(sys.argv) > 1 else SRC

LITERALS = "who a an the and but so he she it they his her was would of to with that then".split()

def read_tags(path):
    out = []
    for line in open(path):
        line = line.strip()
        if line:
            w, t = line.split()
            out.append((w, t))
    return out

tags = read_tags(os.path.join(SRC, "tags_corpus.txt")) + read_tags(os.path.join(SRC, "extra_tags.txt"))
# words that double as names keep their common-word tag
override = {"drew": "VBD", "may": "MD", "rose": "VBD", "jack": "NN"}
tags = [(w, override.get(w, t)) for w, t in tags]
tag_of = dict(tags)

names = []
for line in open(os.path.join(SRC, "names.txt")):
    line = line.strip()
    if line:
        names.append(line)
name_words = [n.split(",")[0].lower() for n in names]
for n in name_words:
    if n not in tag_of:
        tags.append((n, "NNP"))
        tag_of[n] = "NNP"

d = cmudict.dict()
with open(os.path.join(OUT, "lexicon.dict"), "w") as f:
    f.write(";;; toy pronunciation dictionary (subset of the CMU Pronouncing Dictionary)\n")
    for w in sorted(tag_of):
        for i, p in enumerate(d[w]):
            key = w.upper() if i == 0 else "%s(%d)" % (w.upper(), i)
            f.write("%s  %s\n" % (key, " ".join(p)))

with open(os.path.join(OUT, "tags.tsv"), "w") as f:
    for w, t in sorted(tags):
        f.write("%s\t%s\n" % (w, t))
with open(os.path.join(OUT, "literals.txt"), "w") as f:
    f.write("\n".join(LITERALS) + "\n")
with open(os.path.join(OUT, "names.txt"), "w") as f:
    f.write("\n".join(names) + "\n")

def tag_word(w):
    w = w.lower()
    return w.upper() if w in LITERALS else tag_of[w]

poems = [b.strip().split("\n") for b in open(os.path.join(SRC, "corpus.txt")).read().strip().split("\n\n")]
with open(os.path.join(OUT, "corpus.jsonl"), "w") as f:
    for i, p in enumerate(poems):
        rec = {"id": "toy-%03d" % (i + 1),
               "lines": [[{"word": w, "tag": tag_word(w)} for w in line.split()] for line in p]}
        f.write(json.dumps(rec) + "\n")

# LM training text: corpus lines, then one short sentence per extra word
frames = {"NN": "he saw the {}", "NNS": "they saw the {}", "JJ": "it was so {}", "VB": "he would {}",
          "VBD": "and then he {}", "VBN": "it was {}", "VBZ": "she {}", "RB": "he went {}",
          "CD": "he had {}", "VBG": "he was {}"}
with open(os.path.join(OUT, "lm_corpus.txt"), "w") as f:
    for p in poems:
        for line in p:
            f.write(line.lower() + "\n")
    for w, t in read_tags(os.path.join(SRC, "extra_tags.txt")):
        f.write(frames[t].format(w) + "\n")

TOPICS = {
 "money": "money cash bank coin gold rich dime price pay paid bill sold cost spend lend purse store shop",
 "war": "war sword gun fight battle soldier raid campaign attack knight guard lord tank shot fled crash strike",
 "sports": "sports ball game team goal race track athlete bat run runner skate swim gym score jog pool bike hike",
 "monster": "monster ghost witch scary bite howl grave dark night cave bone roar shark fright thief crime",
 "forest": "forest tree trees wood pine leaf log fox bear owl hike vine twig brook stream fog bog",
 "food": "food bread cake pie stew soup cheese rice ham jam egg eggs toast meat steak beef feast lunch dish sandwich snack treat slice plum fig berry cherry cream pea bean corn wheat grain yeast bun gum lime tea wine",
 "sea": "sea boat fish whale wave waves shore crab shell sand sail sailor bay reef tide canoe oar shark gale float coast splash cod trout",
 "music": "music song tune drum band bell guitar violin sing singer sang gong horn hymn string voice dance dancer rhyme verse swing",
 "school": "school class book books teacher student desk exam pen ink rule notes note learn teach kids spell",
 "farm": "farm farmer barn hen cow pig pigs sheep goat ram lamb hay corn plow mule hog seed seeds plant wheat grain",
 "winter": "winter snow ice cold sled coat frost storm chill fog skate glove hat white",
 "party": "party cake balloon gift game dance fun treat hat band song cream drum prank clown",
 "garden": "garden flower flowers rose tree seed weed plant planted bee bees pea vine hose spade rake grass leaf pot thorn",
 "city": "city street car bus train town road shop store bank hotel park mall lane van tower",
 "love": "love heart kiss rose date ring dove bride friend friends sweet glove dream care",
 "night": "night moon star dark sleep bed dream owl light lights sky bat shine glow",
 "king": "king crown throne queen gold castle knight sword lord ring chief grand state",
 "train": "train track car seat plane van line chain steam load",
 "dog": "dog bark bone cat ball tail hound bite walk",
 "doctor": "doctor pill nurse sick flu knee head drill throat pain care",
}
CONTENT = {"NN", "NNS", "JJ", "VB", "VBD", "VBN", "VBG", "VBZ", "RB", "CD"}
topic_names = sorted(TOPICS)
NOISE = 12
dim = len(topic_names) + NOISE
rng = random.Random(20200101)
vecs = {}
for w, t in sorted(tags):
    if t not in CONTENT:
        continue
    v = [0.0] * dim
    for ti, tn in enumerate(topic_names):
        if w in TOPICS[tn].split():
            v[ti] += 1.0
    for k in range(dim):
        v[k] += rng.gauss(0.0, 0.3)
    vecs[w] = v
with open(os.path.join(OUT, "embeddings.txt"), "w") as f:
    f.write("%d %d\n" % (len(vecs), dim))
    for w in sorted(vecs):
        f.write(w + " " + " ".join("%.5f" % x for x in vecs[w]) + "\n")

with open(os.path.join(OUT, "prompts.txt"), "w") as f:
    f.write("\n".join(topic_names) + "\n")
