//! Token layout. Token `l = (t·gh + r)·gw + c` covers a `p×p` block of every
//! channel; within a token, feature `(ch·p + dy)·p + dx`.

/// `[frames, channels, h, w]` to `[frames·(h/p)·(w/p), channels·p²]`.
pub fn patchify(data: &[f32], frames: usize, channels: usize, h: usize, w: usize, p: usize) -> Vec<f32> {
    assert_eq!(data.len(), frames * channels * h * w);
    assert!(h % p == 0 && w % p == 0);
    let (gh, gw) = (h / p, w / p);
    let feat = channels * p * p;
    let mut out = vec![0.0f32; frames * gh * gw * feat];
    for t in 0..frames {
        for ch in 0..channels {
            let plane = &data[(t * channels + ch) * h * w..(t * channels + ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let l = (t * gh + y / p) * gw + x / p;
                    let f = (ch * p + y % p) * p + x % p;
                    out[l * feat + f] = plane[y * w + x];
                }
            }
        }
    }
    out
}

/// Gather index taking `[batch, tokens, channels·p²]` back to
/// `[batch, frames, channels, h, w]`.
pub fn unpatchify_index(batch: usize, frames: usize, channels: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let tokens = frames * gh * gw;
    let feat = channels * p * p;
    let mut index = Vec::with_capacity(batch * frames * channels * h * w);
    for b in 0..batch {
        for t in 0..frames {
            for ch in 0..channels {
                for y in 0..h {
                    for x in 0..w {
                        let l = (t * gh + y / p) * gw + x / p;
                        let f = (ch * p + y % p) * p + x % p;
                        index.push((b * tokens + l) * feat + f);
                    }
                }
            }
        }
    }
    index
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unpatchify_inverts_patchify() {
        let (t, c, h, w, p) = (3, 2, 4, 6, 2);
        let data: Vec<f32> = (0..t * c * h * w).map(|i| i as f32).collect();
        let tokens = patchify(&data, t, c, h, w, p);
        let back: Vec<f32> = unpatchify_index(1, t, c, h, w, p).iter().map(|&i| tokens[i]).collect();
        assert_eq!(back, data);
    }

    #[test]
    fn token_holds_one_block() {
        // 1 frame, 1 channel, 2x4 image, p = 2: token 1 is the right block
        let data = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let tokens = patchify(&data, 1, 1, 2, 4, 2);
        assert_eq!(&tokens[4..], &[2.0, 3.0, 6.0, 7.0]);
    }
}
