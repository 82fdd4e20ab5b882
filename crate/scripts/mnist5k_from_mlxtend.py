"""Build the bundled 5000-digit MNIST subset (IDX, gzipped) from the copy
shipped inside the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz).

Usage: pip download --no-deps mlxtend && python3 mnist5k_from_mlxtend.py <wheel> <outdir>
"""
import gzip
import struct
import sys
import zipfile

wheel, out = sys.argv[1], sys.argv[2]
raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
rows = [list(map(int, l.split(","))) for l in gzip.decompress(raw).decode().split()]
images = bytearray(struct.pack(">IIII", 0x803, len(rows), 28, 28))
labels = bytearray(struct.pack(">II", 0x801, len(rows)))
for r in rows:
    images.extend(bytes(r[:784]))
    labels.append(r[784])
with gzip.GzipFile(f"{out}/images.idx.gz", "wb", mtime=0) as f:
    f.write(images)
with gzip.GzipFile(f"{out}/labels.idx.gz", "wb", mtime=0) as f:
    f.write(labels)
