use super::{forward, ModelError, Parameters, TokenId, EOS};

/// Temperature-0 generation: repeatedly append the arg-max token until EOS
/// or `max_new` tokens. Only the last `context_window` tokens are fed back.
/// Ties resolve to the lowest token id.
pub fn greedy_decode(
    params: &Parameters,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>, ModelError> {
    let window = params.config().context_window;
    let mut seq = prompt.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new {
        let start = seq.len().saturating_sub(window);
        let out = forward(params, &seq[start..])?;
        if out.is_empty() {
            break;
        }
        let last = out.logprobs_at(out.len() - 1);
        let mut best = 0;
        for (i, &lp) in last.iter().enumerate() {
            if lp > last[best] {
                best = i;
            }
        }
        let next = best as TokenId;
        if next == EOS {
            break;
        }
        seq.push(next);
        generated.push(next);
    }
    Ok(generated)
}
