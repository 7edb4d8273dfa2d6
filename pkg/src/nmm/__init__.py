"""Neural mixture model: parallel shallow towers trained with CTC."""
