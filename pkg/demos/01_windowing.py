# Slicing a recording into overlapping one-second windows.
import numpy as np

from avclip.windowing import WindowSpec, compute_windows, frame_indices, resample_linear

spec = WindowSpec()          # 1 s windows, 75% overlap, 16 frames out of 32 fps
print("hop (s):", spec.hop)

m = compute_windows(2.0, spec, source_id="clip0")
for w in m.windows:
    print(w.index, w.start_s, w.end_s, "frames", w.frame_indices[:4], "...", "audio", w.audio_sample_range)

# every other frame at 32 fps
print(np.diff(frame_indices((0.0, 1.0), spec)))

# first two minutes of an episode are skipped when ingesting real media
long = compute_windows(125.0, spec, trim_s=120.0)
print(len(long), "windows, first starts at", long.windows[0].start_s)

# 44.1 kHz audio brought down to 16 kHz
t = np.arange(441) / 44100
pcm = np.sin(2 * np.pi * 440 * t)
out = resample_linear(pcm, 44100, 16000)
print(pcm.shape, "->", out.shape)
